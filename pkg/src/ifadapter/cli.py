"""Command-line entry point: data generation, training, sampling, evaluation, ablation.

Every command resolves its settings (defaults < ``--config`` JSON < flags <
``IFAL_SEED``) into one flat dict, runs, and writes a run manifest next to its
primary output. ``ifal rerun MANIFEST --into DIR`` replays a manifest with
outputs redirected and reports whether every artifact hash matches.

Exit codes: 0 success, 1 rerun mismatch, 2 configuration or validation error,
3 numeric failure (a diagnostic dump is written next to the output).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .adapter import AdapterConfig
from .data import SceneConfig, always_false, always_true, load_split, save_png, verify, write_split
from .diffusion import ModelConfig, SampleConfig, ToyLDM, TrainConfig, train
from .layout import LayoutSpec, ValidationError
from .metrics import evaluate
from .nn.autograd import NumericError
from .nn.params import CheckpointError
from .text_encoder import TextEncoderConfig

log = logging.getLogger("ifadapter")

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_SUFFIX = ".manifest.json"

VERIFIERS: dict[str, Callable] = {"shapes": verify, "always-true": always_true, "always-false": always_false}


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    def __init__(self, message: str, dump_path: str):
        super().__init__(message)
        self.dump_path = dump_path


# helpers -----------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(path: Path, workdir: Path) -> dict[str, str]:
    if path.is_file():
        return {path.relative_to(workdir).as_posix(): sha256_file(path)}
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            out[p.relative_to(workdir).as_posix()] = sha256_file(p)
    return out


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _split_fields(cfg: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: cfg[k] for k in names if k in cfg}


def _model_config(d: dict) -> ModelConfig:
    d = dict(d)
    text = d.pop("text", {})
    unknown = set(d) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"model: unknown keys {sorted(unknown)}")
    if "inject_sites" in d:
        d["inject_sites"] = tuple(d["inject_sites"])
    if "taps" in text:
        text = {**text, "taps": tuple(text["taps"])}
    return ModelConfig(**d, text=TextEncoderConfig(**text))


def _training_data(data_dir: Path, limit: int | None, model: ToyLDM):
    corpus = load_split(data_dir)
    n = len(corpus) if limit is None else min(limit, len(corpus))
    if n < 1:
        raise ConfigError(f"{data_dir}: empty training split")
    latents = model.codec.encode(np.stack(corpus.images[:n]))
    return latents, corpus.layouts[:n]


class _LossLog:
    """JSON-lines loss writer that also keeps a short tail for NaN dumps."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", encoding="utf-8")
        self.tail: list[dict] = []
        self.last_step = 0

    def __call__(self, rec: dict) -> None:
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.last_step = rec["step"]
        self.tail = (self.tail + [rec])[-20:]

    def close(self):
        self.fh.close()


def _run_training(model: ToyLDM, latents, layouts, tcfg: TrainConfig, phase: str, out: Path, log_path: Path):
    losses = _LossLog(log_path)
    try:
        train(model, latents, layouts, tcfg, phase, losses)
    except NumericError as exc:
        dump = out.with_name(out.name + ".nan_dump.json")
        stats = {n: {"finite": bool(np.isfinite(model.store[n].data).all()),
                     "absmax": float(np.nan_to_num(np.abs(model.store[n].data)).max(initial=0.0))}
                 for n in model.store.names()}
        _dump_json(dump, {"error": str(exc), "phase": phase, "after_step": losses.last_step,
                          "recent": losses.tail, "params": stats})
        raise NumericFailure(f"non-finite value during {phase} training after step {losses.last_step}: {exc}",
                             str(dump)) from exc
    finally:
        losses.close()


# commands ----------------------------------------------------------------------
# each: (defaults, output keys, runner(cfg, workdir) -> list of output paths)

def run_gen_data(cfg: dict, wd: Path) -> list[Path]:
    try:
        scene = SceneConfig(**{**cfg["scene"], **({"p_shapes": tuple(cfg["scene"]["p_shapes"])}
                                                  if "p_shapes" in cfg["scene"] else {})})
    except TypeError as exc:
        raise ConfigError(f"scene: {exc}") from None
    out = wd / cfg["out"]
    for split in ("train", "eval"):
        n = cfg[f"n_{split}"]
        if not isinstance(n, int) or isinstance(n, bool):
            raise ValidationError("sample count must be an integer", f"n_{split}")
        write_split(out, split, n, cfg["seed"], scene)
    return [out]


def run_pretrain(cfg: dict, wd: Path) -> list[Path]:
    model = ToyLDM(_model_config({**cfg["model"], "seed": cfg["seed"]}))
    latents, layouts = _training_data(wd / cfg["data"], cfg["n_train"], model)
    tcfg = TrainConfig(**_split_fields(cfg, TrainConfig))
    out = wd / cfg["out"]
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = wd / (cfg["log"] or cfg["out"] + ".loss.jsonl")
    _run_training(model, latents, layouts, tcfg, "base", out, log_path)
    model.save_base(out)
    return [out, Path(f"{out}.json"), log_path]


def run_train_adapter(cfg: dict, wd: Path) -> list[Path]:
    base = wd / cfg["base"]
    if not base.exists():
        raise ConfigError(f"base checkpoint not found: {cfg['base']}")
    model = ToyLDM.from_checkpoints(base)
    acfg = AdapterConfig(**{**cfg["adapter_config"], "seed": cfg["seed"],
                            "use_appearance": not cfg["no_appearance_tokens"], "use_eot": not cfg["no_eot"]})
    model.attach_adapter(acfg)
    latents, layouts = _training_data(wd / cfg["data"], cfg["n_train"], model)
    tcfg = TrainConfig(**_split_fields(cfg, TrainConfig))
    out = wd / cfg["out"]
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = wd / (cfg["log"] or cfg["out"] + ".loss.jsonl")
    _run_training(model, latents, layouts, tcfg, "adapter", out, log_path)
    model.save_adapter(out)
    return [out, Path(f"{out}.json"), log_path]


def _load_model(cfg: dict, wd: Path) -> ToyLDM:
    base = wd / cfg["base"]
    if not base.exists():
        raise ConfigError(f"base checkpoint not found: {cfg['base']}")
    adapter = None
    if cfg.get("adapter"):
        adapter = wd / cfg["adapter"]
        if not adapter.exists():
            raise ConfigError(f"adapter checkpoint not found: {cfg['adapter']}")
    return ToyLDM.from_checkpoints(base, adapter)


def run_sample(cfg: dict, wd: Path) -> list[Path]:
    layout = LayoutSpec.load(wd / cfg["layout"])
    model = _load_model(cfg, wd)
    scfg = SampleConfig(steps=cfg["steps"], cfg_scale=cfg["cfg_scale"], seed=cfg["seed"])
    trace = {} if cfg["dump_ism"] else None
    lat = model.sample([layout], scfg, use_adapter=bool(cfg.get("adapter")), trace=trace,
                       unconditional=cfg["unconditional"])
    out = wd / cfg["out"]
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(model.render(lat)[0], out)
    outputs = [out]
    if cfg["dump_latents"]:
        p = wd / cfg["dump_latents"]
        np.save(p, lat[0])
        outputs.append(p)
    if cfg["dump_ism"]:
        p = wd / cfg["dump_ism"]
        arrays = {f"{site}_{k}": v[0] for site, d in sorted(trace.items()) for k, v in d.items()}
        with open(p, "wb") as fh:
            np.savez(fh, **arrays)
        outputs.append(p)
    return outputs


def run_eval(cfg: dict, wd: Path) -> list[Path]:
    if cfg["verifier"] not in VERIFIERS:
        raise ConfigError(f"unknown verifier {cfg['verifier']!r}; choose from {sorted(VERIFIERS)}")
    corpus = load_split(wd / cfg["data"])
    n = len(corpus) if cfg["n"] is None else min(cfg["n"], len(corpus))
    layouts, real = corpus.layouts[:n], corpus.images[:n]
    if cfg["gt_renders"]:
        images = list(real)
    else:
        model = _load_model(cfg, wd)
        images = []
        bs = cfg["batch_size"]
        for b in range(0, n, bs):
            scfg = SampleConfig(steps=cfg["steps"], cfg_scale=cfg["cfg_scale"], seed=cfg["seed"] + b)
            try:
                lat = model.sample(layouts[b:b + bs], scfg, use_adapter=bool(cfg.get("adapter")))
                images.extend(model.render(lat))
            except NumericError:
                raise
            except Exception as exc:  # a failed batch becomes blank images, counted unsuccessful
                log.warning("sampling failed for layouts %d..%d: %s", b, b + bs - 1, exc)
                images.extend(np.full_like(real[0], 0.5) for _ in layouts[b:b + bs])
    report = evaluate(images, layouts, VERIFIERS[cfg["verifier"]], real_images=real)
    out = wd / cfg["out"]
    _dump_json(out, report.to_json())
    outputs = [out]
    if cfg["save_images"]:
        d = wd / cfg["save_images"]
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            save_png(img, d / f"{i:06d}.png")
        outputs.append(d)
    log.info("ifs_rate=%.4f ap50=%.4f frechet=%.4f n=%d", report.ifs_rate, report.ap, report.frechet,
             report.n_instances)
    return outputs


ABLATION_VARIANTS = (("full", {}), ("no_appearance", {"no_appearance_tokens": True}), ("no_eot", {"no_eot": True}))


def run_ablation(cfg: dict, wd: Path) -> list[Path]:
    """Base pretraining, three adapter variants, and IFS evaluation of all four models."""
    root = Path(cfg["out"])
    steps = []

    def sub(command, overrides):
        c = resolve(command, {}, overrides, env_seed=None)
        execute(command, c, wd)
        steps.append(command)
        return c

    data = cfg["data"]
    if cfg["gen_data"]:
        sub("gen-data", {"out": data, "n_train": cfg["n_train"], "n_eval": cfg["n_eval"], "seed": cfg["seed"]})
    base = (root / "base.ifal").as_posix()
    sub("pretrain", {"data": f"{data}/train", "out": base, "steps": cfg["base_steps"], "lr": cfg["base_lr"],
                     "seed": cfg["seed"], "model": cfg["model"], "batch_size": cfg["batch_size"]})
    results = {}
    evals = [("base_only", None)]
    for name, flags in ABLATION_VARIANTS:
        ad = (root / f"adapter_{name}.ifal").as_posix()
        sub("train-adapter", {"base": base, "data": f"{data}/train", "out": ad, "steps": cfg["adapter_steps"],
                              "lr": cfg["adapter_lr"], "seed": cfg["seed"], "batch_size": cfg["batch_size"],
                              **flags})
        evals.append((name, ad))
    for name, ad in evals:
        rep = (root / f"report_{name}.json").as_posix()
        sub("eval", {"base": base, "adapter": ad, "data": f"{data}/eval", "out": rep, "n": cfg["n_eval"],
                     "steps": cfg["sample_steps"], "cfg_scale": cfg["cfg_scale"], "seed": cfg["seed"]})
        r = json.loads((wd / rep).read_text(encoding="utf-8"))
        results[name] = {k: r[k] for k in ("ifs_rate", "ap50", "frechet", "n")}
    ifs = {k: v["ifs_rate"] for k, v in results.items()}
    summary = {
        "results": results,
        "ordering_full_gt_noapp_gt_noeot": ifs["full"] > ifs["no_appearance"] > ifs["no_eot"],
        "full_at_least_2x_base": ifs["full"] >= 2 * ifs["base_only"] and ifs["full"] > 0,
    }
    out = wd / root / "summary.json"
    _dump_json(out, summary)
    return [out] + [wd / root / f"{stem}.ifal" for stem in ["base"] + [f"adapter_{n}" for n, _ in ABLATION_VARIANTS]] \
        + [wd / root / f"report_{name}.json" for name, _ in evals]


COMMANDS: dict[str, tuple[dict, tuple[str, ...], Callable]] = {
    "gen-data": ({"out": "data", "seed": 0, "n_train": 2000, "n_eval": 200, "scene": {}},
                 ("out",), run_gen_data),
    "pretrain": ({"data": "data/train", "out": "ckpt/base.ifal", "log": None, "n_train": None, "model": {},
                  "steps": 2000, "lr": 1e-3, "batch_size": 16, "p_drop_local": 0.15, "p_drop_global": 0.30,
                  "weight_decay": 0.01, "seed": 0, "log_every": 1},
                 ("out", "log"), run_pretrain),
    "train-adapter": ({"base": "ckpt/base.ifal", "data": "data/train", "out": "ckpt/adapter.ifal", "log": None,
                       "n_train": None, "adapter_config": {}, "no_appearance_tokens": False, "no_eot": False,
                       "steps": 2000, "lr": 3e-3, "batch_size": 16, "p_drop_local": 0.15, "p_drop_global": 0.30,
                       "weight_decay": 0.01, "seed": 0, "log_every": 1},
                      ("out", "log"), run_train_adapter),
    "sample": ({"base": "ckpt/base.ifal", "adapter": None, "layout": None, "out": "sample.png", "steps": 50,
                "cfg_scale": 7.5, "seed": 0, "unconditional": False, "dump_latents": None, "dump_ism": None},
               ("out", "dump_latents", "dump_ism"), run_sample),
    "eval": ({"base": "ckpt/base.ifal", "adapter": None, "data": "data/eval", "out": "report.json", "n": None,
              "steps": 50, "cfg_scale": 7.5, "seed": 0, "batch_size": 16, "verifier": "shapes",
              "gt_renders": False, "save_images": None},
             ("out", "save_images"), run_eval),
    "ablation": ({"out": "runs/ablation", "data": "data", "gen_data": True, "n_train": 2000, "n_eval": 200,
                  "seed": 0, "model": {}, "batch_size": 16, "base_steps": 2000, "base_lr": 1e-3,
                  "adapter_steps": 2000, "adapter_lr": 3e-3, "sample_steps": 50, "cfg_scale": 7.5},
                 ("out", "data"), run_ablation),
}


# resolution / execution ----------------------------------------------------------

def resolve(command: str, file_cfg: dict, flags: dict, env_seed: str | None) -> dict:
    defaults = COMMANDS[command][0]
    unknown = (set(file_cfg) | set(flags)) - set(defaults)
    if unknown:
        raise ConfigError(f"{command}: unknown settings {sorted(unknown)}")
    cfg = {**defaults, **file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"IFAL_SEED must be an integer, got {env_seed!r}") from None
    return cfg


def output_keys(command: str, cfg: dict) -> list[str]:
    keys = list(COMMANDS[command][1])
    if command == "ablation" and not cfg["gen_data"]:
        keys.remove("data")
    return keys


def manifest_path(command: str, cfg: dict, wd: Path) -> Path:
    out = wd / cfg["out"]
    return out.parent / (out.name + MANIFEST_SUFFIX)


def execute(command: str, cfg: dict, wd: Path) -> dict:
    started = time.time()
    outputs = COMMANDS[command][2](cfg, wd)
    artifacts: dict[str, str] = {}
    for p in outputs:
        artifacts.update(_hash_tree(Path(p), wd))
    inputs = {}
    for key in ("base", "adapter", "layout"):
        if isinstance(cfg.get(key), str) and (wd / cfg[key]).is_file():
            inputs[cfg[key]] = sha256_file(wd / cfg[key])
    manifest = {
        "command": command,
        "config": cfg,
        "seeds": {"seed": cfg.get("seed")},
        "inputs": inputs,
        "artifacts": artifacts,
        "outputs": output_keys(command, cfg),
        "workdir": str(wd.resolve()),
        "started": started,
        "finished": time.time(),
        "version": __version__,
        "platform": {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine()},
    }
    _dump_json(manifest_path(command, cfg, wd), manifest)
    return manifest


def _redirect(cfg: dict, keys, into: str) -> dict:
    out = dict(cfg)
    for k in keys:
        if out.get(k):
            out[k] = (Path(into) / out[k]).as_posix()
    return out


def rerun(manifest_file: Path, into: str, wd: Path | None) -> int:
    man = json.loads(manifest_file.read_text(encoding="utf-8"))
    command = man["command"]
    if command not in COMMANDS:
        raise ConfigError(f"manifest names unknown command {command!r}")
    wd = wd or Path(man["workdir"])
    cfg = _redirect(man["config"], man["outputs"], into)
    new = execute(command, cfg, wd)
    prefix = Path(into).as_posix() + "/"
    got = {k[len(prefix):] if k.startswith(prefix) else k: v for k, v in new["artifacts"].items()}
    want = man["artifacts"]
    same = got == want
    for k in sorted(set(got) | set(want)):
        if got.get(k) != want.get(k):
            print(f"MISMATCH {k}: {want.get(k)} != {got.get(k)}")
    print("rerun identical" if same else "rerun differs")
    return EXIT_OK if same else EXIT_MISMATCH


# argument parsing -----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with settings (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--log")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifal", description=__doc__.split("\n")[0])
    ap.add_argument("--workdir", type=Path, default=Path("."), help="root for every relative path")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/eval corpus")
    _add_common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-eval", type=int)

    p = sub.add_parser("pretrain", help="train the base denoiser on captions")
    _add_common(p)
    _add_train(p)

    p = sub.add_parser("train-adapter", help="freeze the base and train the adapter")
    _add_common(p)
    _add_train(p)
    p.add_argument("--base")
    p.add_argument("--no-appearance-tokens", action="store_true", default=None)
    p.add_argument("--no-eot", action="store_true", default=None)

    p = sub.add_parser("sample", help="render one layout")
    _add_common(p)
    p.add_argument("--base")
    p.add_argument("--adapter")
    p.add_argument("--layout", required=False)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--unconditional", action="store_true", default=None)
    p.add_argument("--dump-latents")
    p.add_argument("--dump-ism")

    p = sub.add_parser("eval", help="sample the eval split and score it")
    _add_common(p)
    p.add_argument("--base")
    p.add_argument("--adapter")
    p.add_argument("--data")
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--verifier", choices=sorted(VERIFIERS))
    p.add_argument("--gt-renders", action="store_true", default=None,
                   help="score the corpus images themselves (pipeline sanity check)")
    p.add_argument("--save-images")

    p = sub.add_parser("ablation", help="reference run: base, three adapter variants, four evaluations")
    _add_common(p)
    for flag, typ in (("--data", str), ("--n-train", int), ("--n-eval", int), ("--base-steps", int),
                      ("--adapter-steps", int), ("--base-lr", float), ("--adapter-lr", float),
                      ("--sample-steps", int), ("--batch-size", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--no-gen-data", dest="gen_data", action="store_false", default=None)

    p = sub.add_parser("rerun", help="replay a run manifest into another directory and compare hashes")
    p.add_argument("manifest", type=Path)
    p.add_argument("--into", required=True, help="directory (under the workdir) for the replayed outputs")
    return ap


def _flags(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "workdir", "verbose"}
    return {k: v for k, v in vars(ns).items() if k not in skip}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    wd = args.workdir
    try:
        if args.command == "rerun":
            return rerun(wd / args.manifest, args.into, wd)
        file_cfg = {}
        if args.config is not None:
            path = wd / args.config
            try:
                file_cfg = json.loads(path.read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {args.config}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"{args.config}: expected a JSON object")
        cfg = resolve(args.command, file_cfg, _flags(args), os.environ.get("IFAL_SEED"))
        if args.command == "sample" and not cfg["layout"]:
            raise ConfigError("sample needs --layout")
        man = execute(args.command, cfg, wd)
        for path in sorted(man["artifacts"]):
            print(path)
        return EXIT_OK
    except NumericFailure as exc:
        print(f"error: {exc} (diagnostics: {exc.dump_path})", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValidationError, CheckpointError, FileNotFoundError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
