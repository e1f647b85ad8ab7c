import itertools
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from ifadapter.data import always_false, always_true, make_sample, render, verify
from ifadapter.data import ShapeInstance, ShapeScene
from ifadapter.layout import BBox, InstanceDescriptor, LayoutSpec
from ifadapter.metrics import (
    Detection, FeatureExtractor, average_precision, detect, evaluate, feature_stats,
    frechet_distance, ifs_rate, iou, match_detections,
)
from ifadapter.nn import NumericError


boxes = st.tuples(st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.05, 0.2), st.floats(0.05, 0.2)) \
    .map(lambda t: BBox(*t))


# iou -------------------------------------------------------------------------------

def test_iou_fixture_exact():
    v = iou(BBox(0, 0, 0.5, 0.5), BBox(0.25, 0.25, 0.5, 0.5))
    assert abs(v - 1 / 7) < 1e-12
    # cell-count cross-check on a 100x100 grid (both boxes align with cells)
    g = np.zeros((2, 100, 100), bool)
    g[0, :50, :50] = True
    g[1, 25:75, 25:75] = True
    assert (g[0] & g[1]).sum() / (g[0] | g[1]).sum() == pytest.approx(1 / 7, abs=1e-15)


def test_iou_trivial():
    a = BBox(0.1, 0.2, 0.3, 0.4)
    assert iou(a, a) == 1.0
    assert iou(BBox(0, 0, 0.2, 0.2), BBox(0.5, 0.5, 0.2, 0.2)) == 0.0


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


# matching ------------------------------------------------------------------------------

def _brute_best_assignment(dets, gts, thr):
    """Max number of matches, then max total IoU, over every one-to-one assignment."""
    best = (0, 0.0)
    for perm in itertools.permutations(range(len(dets)), len(gts)):
        pairs = [(g, d) for g, d in enumerate(perm) if iou(dets[d].bbox, gts[g]) >= thr]
        key = (len(pairs), sum(iou(dets[d].bbox, gts[g]) for g, d in pairs))
        best = max(best, key)
    return best


def test_matching_crafted_case_equals_brute_force():
    gts = [BBox(0, 0, 0.4, 0.4), BBox(0.5, 0.5, 0.4, 0.4)]
    dets = [Detection(BBox(0.02, 0.02, 0.4, 0.4), 0.9),
            Detection(BBox(0.45, 0.5, 0.4, 0.4), 0.8),
            Detection(BBox(0.1, 0.0, 0.4, 0.4), 0.7)]
    m = match_detections(dets, gts)
    assert m.gt_to_det == [0, 1] and m.det_to_gt == [0, 1, None]
    n, total = _brute_best_assignment(dets, gts, 0.5)
    assert m.n_matched == n
    assert sum(m.gt_iou) == pytest.approx(total, abs=1e-12)


def test_matching_trivial():
    gts = [BBox(0, 0, 0.3, 0.3), BBox(0.5, 0.5, 0.3, 0.3)]
    m = match_detections([Detection(g, 1.0) for g in gts], gts)
    assert m.gt_to_det == [0, 1] and m.gt_iou == [1.0, 1.0]
    m = match_detections([], gts)
    assert m.gt_to_det == [None, None]


def test_matching_below_threshold_fails():
    m = match_detections([Detection(BBox(0, 0, 0.5, 0.5), 1.0)], [BBox(0.25, 0.25, 0.5, 0.5)])
    assert m.gt_to_det == [None]


def test_detection_score_finite():
    with pytest.raises(ValueError):
        Detection(BBox(0, 0, 1, 1), float("nan"))


# ifs rate -------------------------------------------------------------------------------

def test_ifs_rate_hand_tally():
    img = np.zeros((64, 64, 3))
    samples, expected = [], 0
    rng = np.random.default_rng(0)
    for k in range(10):
        n = k % 3 + 1
        gts = [BBox(0.3 * i, 0.1, 0.25, 0.25) for i in range(n)]
        lay = LayoutSpec("c", tuple(InstanceDescriptor(b, f"d{k}{i}") for i, b in enumerate(gts)))
        # detect every GT except the last one of odd samples
        found = gts[:-1] if k % 2 else gts
        samples.append((img, lay, [Detection(b, 0.5) for b in found]))
    flags = {}

    def mock(image, bbox, desc):
        v = bool(rng.random() < 0.6)
        flags[desc] = v
        return v

    rate, recs = ifs_rate(samples, mock)
    expected = sum(flags.values())
    assert len(recs) == sum(k % 3 + 1 for k in range(10)) == 19
    assert rate == pytest.approx(expected / 19, abs=1e-15)
    # hand check: 5 odd samples each drop one instance -> 14 verifier calls
    assert len(flags) == 14


def test_ifs_rate_extremes_and_errors():
    gts = [BBox(0, 0, 0.3, 0.3)]
    lay = LayoutSpec("c", (InstanceDescriptor(gts[0], "a red square"),))
    samples = [(np.zeros((64, 64, 3)), lay, [Detection(gts[0], 1.0)])]
    assert ifs_rate(samples, always_true)[0] == 1.0
    assert ifs_rate(samples, always_false)[0] == 0.0
    assert ifs_rate([(samples[0][0], lay, [])], always_true)[0] == 0.0

    def boom(*a):
        raise RuntimeError("crop failed")

    rate, recs = ifs_rate(samples, boom)
    assert rate == 0.0 and "crop failed" in recs[0].error


# average precision ------------------------------------------------------------------------

def _ap_oracle(tp_flags_by_score, n_gt):
    """Precision envelope integrated over each recall step."""
    tps = [f for _, f in sorted(tp_flags_by_score, key=lambda p: -p[0])]
    prec, rec = [], []
    hits = 0
    for i, f in enumerate(tps, 1):
        hits += f
        prec.append(hits / i)
        rec.append(hits / n_gt)
    ap, prev_r = 0.0, 0.0
    for i in range(len(tps)):
        if rec[i] > prev_r:
            ap += (rec[i] - prev_r) * max(prec[i:])
            prev_r = rec[i]
    return ap


def test_ap_five_detection_fixture():
    gts = [BBox(0.0, 0.0, 0.2, 0.2), BBox(0.4, 0.0, 0.2, 0.2), BBox(0.0, 0.5, 0.2, 0.2)]
    dets = [Detection(BBox(0.0, 0.0, 0.2, 0.2), 0.95),   # tp
            Detection(BBox(0.7, 0.7, 0.2, 0.2), 0.90),   # fp
            Detection(BBox(0.41, 0.0, 0.2, 0.2), 0.80),  # tp
            Detection(BBox(0.0, 0.01, 0.2, 0.2), 0.60),  # duplicate -> fp
            Detection(BBox(0.0, 0.52, 0.2, 0.2), 0.50)]  # tp
    got = average_precision(dets, gts)
    oracle = _ap_oracle([(0.95, 1), (0.9, 0), (0.8, 1), (0.6, 0), (0.5, 1)], 3)
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(1 / 3 + (1 / 3) * (2 / 3) + (1 / 3) * (3 / 5), abs=1e-12)


def test_ap_trivial_and_errors():
    gts = [BBox(0, 0, 0.3, 0.3), BBox(0.5, 0.5, 0.3, 0.3)]
    assert average_precision([Detection(g, 0.5) for g in gts], gts) == 1.0
    assert average_precision([Detection(BBox(0.35, 0.0, 0.1, 0.1), 0.5)], gts) == 0.0
    with pytest.raises(ValueError):
        average_precision([Detection(gts[0], 1.0)], [])


def test_ap_score_rescaling_invariant():
    rng = np.random.default_rng(3)
    gts = [BBox(*rng.uniform(0, 0.6, 2), 0.3, 0.3) for _ in range(4)]
    dets = [Detection(BBox(*np.clip(np.array(g.as_list()[:2]) + rng.normal(0, 0.05, 2), 0, 0.7), 0.3, 0.3),
                      float(rng.random())) for g in gts for _ in range(2)]
    a = average_precision(dets, gts)
    b = average_precision([Detection(d.bbox, math.exp(3 * d.score)) for d in dets], gts)
    assert a == b


# frechet ------------------------------------------------------------------------------------

def _frechet_oracle(mu1, c1, mu2, c2):
    covmean = scipy.linalg.sqrtm(c1 @ c2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(c1 + c2 - 2 * covmean))


def test_frechet_random_psd_fixture():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 4, 4))
    c1, c2 = a @ a.T, b @ b.T
    mu1, mu2 = rng.standard_normal((2, 4))
    assert frechet_distance(mu1, c1, mu2, c2) == pytest.approx(_frechet_oracle(mu1, c1, mu2, c2), abs=1e-9)


def test_frechet_trivial_and_symmetry():
    I = np.eye(3)
    v = np.array([1.0, -2.0, 0.5])
    assert frechet_distance(np.zeros(3), I, np.zeros(3), I) == pytest.approx(0.0, abs=1e-12)
    assert frechet_distance(np.zeros(3), I, v, I) == pytest.approx(v @ v, abs=1e-12)
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 5, 5))
    c1, c2 = a @ a.T, b @ b.T
    assert frechet_distance(v[:1].repeat(5), c1, np.zeros(5), c2) == pytest.approx(
        frechet_distance(np.zeros(5), c2, v[:1].repeat(5), c1), abs=1e-9)


def test_frechet_non_psd_raises():
    with pytest.raises(NumericError):
        frechet_distance(np.zeros(2), np.diag([1.0, -0.5]), np.zeros(2), np.eye(2))


def test_feature_extractor_fixed():
    imgs = np.random.default_rng(0).random((5, 64, 64, 3))
    f1, f2 = FeatureExtractor()(imgs), FeatureExtractor()(imgs)
    assert f1.shape == (5, 16) and f1.tobytes() == f2.tobytes()
    mu, cov = feature_stats(f1)
    assert cov.shape == (16, 16)


# detector + pipeline ------------------------------------------------------------------------

def test_detector_finds_rendered_shapes():
    box = BBox(0.25, 0.25, 0.5, 0.5)
    img = render(ShapeScene((ShapeInstance("circle", "green", box),)))
    dets = detect(img, ["a green circle", "a red square"])
    assert len(dets) == 1 and dets[0].label == "a green circle"
    assert iou(dets[0].bbox, box) == 1.0


def test_evaluate_closed_loop_on_gt_renders():
    samples = [make_sample(s) for s in range(40)]
    imgs = [s.image for s in samples]
    lays = [s.layout for s in samples]
    rep = evaluate(imgs, lays, verify, real_images=imgs)
    assert rep.ifs_rate == 1.0 and rep.ap == 1.0
    assert rep.frechet == pytest.approx(0.0, abs=1e-9)
    js = rep.to_json()
    assert set(js) == {"ifs_rate", "ap50", "frechet", "n", "per_instance"}
    assert evaluate(imgs, lays, always_false).ifs_rate == 0.0
