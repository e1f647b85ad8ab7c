import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "reference: needs the full reference training run (slow, cached)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "why": "", "notes": []})
    entry["seconds"] += rep.duration
    if rep.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "note"]
    if rep.failed or (rep.when == "setup" and rep.skipped):
        entry["ok"] = False
        lines = rep.longreprtext.splitlines()
        errs = [l[1:].strip() for l in lines if l.startswith("E ")]
        entry["why"] = (errs[0] if errs else (lines[-1] if lines else "failed"))[:120]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "PASS" if r["ok"] else "FAIL"
        line = f"criterion {n:>2}: {status}  {r['title']}  ({r['seconds']:.1f}s)"
        if not r["ok"]:
            line += f"  -- {r['why']}"
        terminalreporter.write_line(line)
        for note in r["notes"]:
            terminalreporter.write_line(f"               {note}")
