"""Detection matching, IFS rate, AP@IoU, and Frechet distance over toy features."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .data import label_index, palette_labels, parse_description
from .layout import BBox, LayoutSpec, ValidationError
from .nn.autograd import NumericError

log = logging.getLogger(__name__)

Verifier = Callable[[np.ndarray, BBox, str], bool]


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    label: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValidationError("detection score must be finite")


@dataclass
class MatchResult:
    gt_to_det: list[int | None]
    gt_iou: list[float]
    det_to_gt: list[int | None]

    @property
    def n_matched(self) -> int:
        return sum(m is not None for m in self.gt_to_det)


def iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = iw * ih
    # areas from corner differences, the same arithmetic as the intersection
    union = (a.x2 - a.x) * (a.y2 - a.y) + (b.x2 - b.x) * (b.y2 - b.y) - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def match_detections(dets: Sequence[Detection], gts: Sequence[BBox], thr: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection takes its highest-IoU still-unassigned GT (ties to the lower
    GT index) when that IoU reaches ``thr``.
    """
    gt_to_det: list[int | None] = [None] * len(gts)
    gt_iou = [0.0] * len(gts)
    det_to_gt: list[int | None] = [None] * len(dets)
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    for k in order:
        best, best_iou = None, -1.0
        for g, gt in enumerate(gts):
            if gt_to_det[g] is not None:
                continue
            v = iou(dets[k].bbox, gt)
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= thr:
            gt_to_det[best] = k
            gt_iou[best] = best_iou
            det_to_gt[k] = best
    return MatchResult(gt_to_det, gt_iou, det_to_gt)


def average_precision(dets, gts, thr: float = 0.5) -> float:
    """All-point interpolated AP at one IoU threshold.

    ``dets`` / ``gts`` are per-image lists (or a single image's flat lists).
    """
    if gts and isinstance(gts[0], BBox):
        dets, gts = [dets], [gts]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    scored = []
    for img, (d_img, g_img) in enumerate(zip(dets, gts)):
        m = match_detections(d_img, g_img, thr)
        for k, det in enumerate(d_img):
            scored.append((det.score, img, k, m.det_to_gt[k] is not None))
    if not scored:
        return 0.0
    scored.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.array([s[3] for s in scored], dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _psd_sqrt(a: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    if w.min() < -tol:
        raise NumericError(f"matrix not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, tol: float = 1e-8) -> float:
    """``|mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via symmetric eigendecompositions.

    ``tr((S1 S2)^(1/2))`` is evaluated as the sum of square roots of the
    eigenvalues of ``S1^(1/2) S2 S1^(1/2)``, which share the spectrum of S1 S2.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    c1, c2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    for c in (c1, c2):
        if not np.allclose(c, c.T, atol=1e-10):
            raise NumericError("covariance not symmetric")
    s1 = _psd_sqrt(c1, tol)
    m = s1 @ c2 @ s1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(1.0, np.abs(w).max()) if w.size else 1.0
    if w.size and w.min() < -tol * scale:
        raise NumericError(f"product not PSD (min eigenvalue {w.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt, 0.0))


class FeatureExtractor:
    """Fixed seeded features: 8x8 average pool then a linear projection."""

    def __init__(self, dim: int = 16, pool: int = 8, seed: int = 11):
        self.pool = pool
        self.dim = dim
        self.seed = seed
        self._w: np.ndarray | None = None

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        B, H, W, C = x.shape
        p = self.pool
        pooled = x.reshape(B, p, H // p, p, W // p, C).mean(axis=(2, 4)).reshape(B, -1)
        if self._w is None:
            rng = np.random.default_rng(self.seed)
            self._w = rng.standard_normal((pooled.shape[1], self.dim)) / np.sqrt(pooled.shape[1])
        return pooled @ self._w


def feature_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    cov = np.cov(feats, rowvar=False) if len(feats) > 1 else np.zeros((feats.shape[1],) * 2)
    return feats.mean(axis=0), np.atleast_2d(cov)


# toy detector ------------------------------------------------------------------

def detect(image: np.ndarray, descriptions: Sequence[str], min_pixels: int = 16) -> list[Detection]:
    """Phrase-prompted detector over palette colors.

    For each distinct description, pixels whose nearest palette entry is one of
    its colors form 8-connected components; each component of at least
    ``min_pixels`` becomes a detection with its tight box and a score equal to
    the share of its box holding the prompted colors.
    """
    labels = palette_labels(image)
    H, W = labels.shape
    out: list[Detection] = []
    for desc in dict.fromkeys(descriptions):
        try:
            parsed = parse_description(desc)
        except ValidationError:
            log.warning("detector skips unparseable description %r", desc)
            continue
        mask = np.isin(labels, [label_index(c) for c in parsed.colors])
        comp, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        for k, sl in enumerate(ndimage.find_objects(comp), start=1):
            if sl is None:
                continue
            size = int((comp[sl] == k).sum())
            if size < min_pixels:
                continue
            rs, cs = sl
            box = BBox(cs.start / W, rs.start / H, (cs.stop - cs.start) / W, (rs.stop - rs.start) / H)
            score = float(mask[sl].mean())
            out.append(Detection(box, score, desc))
    return out


# report ------------------------------------------------------------------------

@dataclass
class InstanceRecord:
    image: int
    instance: int
    description: str
    gt_box: list[float]
    det_box: list[float] | None
    iou: float
    verdict: bool | None
    success: bool
    error: str | None = None


@dataclass
class MetricsReport:
    ifs_rate: float
    ap: float
    frechet: float
    n_instances: int
    per_instance: list[InstanceRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"ifs_rate": self.ifs_rate, "ap50": self.ap, "frechet": self.frechet,
                "n": self.n_instances, "per_instance": [asdict(r) for r in self.per_instance]}


def ifs_rate(samples: Sequence[tuple[np.ndarray, LayoutSpec, Sequence[Detection]]],
             verifier: Verifier, thr: float = 0.5) -> tuple[float, list[InstanceRecord]]:
    """Share of GT instances that are both localized (IoU >= thr) and verified.

    A verifier exception marks that instance unsuccessful and is logged.
    """
    records: list[InstanceRecord] = []
    for img_id, (image, layout, dets) in enumerate(samples):
        m = match_detections(dets, layout.boxes, thr)
        for g, inst in enumerate(layout.instances):
            k = m.gt_to_det[g]
            verdict, err, det_box = None, None, None
            if k is not None:
                det_box = dets[k].bbox
                try:
                    verdict = bool(verifier(image, det_box, inst.description))
                except Exception as exc:  # verifier failures count as unsuccessful
                    err = f"{type(exc).__name__}: {exc}"
                    log.warning("verifier failed on image %d instance %d: %s", img_id, g, err)
            records.append(InstanceRecord(img_id, g, inst.description, inst.bbox.as_list(),
                                          det_box.as_list() if det_box else None,
                                          m.gt_iou[g], verdict, bool(verdict), err))
    if not records:
        return 0.0, records
    return sum(r.success for r in records) / len(records), records


def evaluate(images: Sequence[np.ndarray], layouts: Sequence[LayoutSpec], verifier: Verifier,
             real_images: Sequence[np.ndarray] | None = None, thr: float = 0.5,
             extractor: FeatureExtractor | None = None) -> MetricsReport:
    """Detector -> matcher -> verifier -> metrics over one image per layout."""
    dets = []
    for image, layout in zip(images, layouts):
        try:
            dets.append(detect(image, layout.descriptions))
        except Exception as exc:
            log.warning("detector failed: %s", exc)
            dets.append([])
    rate, records = ifs_rate(list(zip(images, layouts, dets)), verifier, thr)
    gts = [l.boxes for l in layouts]
    ap = average_precision(dets, gts, thr) if any(gts) else 0.0
    frechet = 0.0
    if real_images is not None:
        ex = extractor or FeatureExtractor()
        mu1, c1 = feature_stats(ex(np.stack(images)))
        mu2, c2 = feature_stats(ex(np.stack(real_images)))
        frechet = frechet_distance(mu1, c1, mu2, c2)
    return MetricsReport(rate, ap, frechet, len(records), records)
