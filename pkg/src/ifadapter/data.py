"""Synthetic shape scenes: generation, rendering, captions, and a programmatic verifier."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .layout import BBox, InstanceDescriptor, LayoutSpec, ValidationError

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
COLOR_NAMES = tuple(PALETTE)
BACKGROUNDS: dict[str, tuple[float, float, float]] = {"gray": (0.5, 0.5, 0.5)}
SHAPES = ("square", "circle", "stripes-square")
STRIPE_PX = 4
_RESTART_AFTER = 200

_LABEL_NAMES = COLOR_NAMES + tuple(BACKGROUNDS)
_LABEL_RGB = np.array([PALETTE[c] for c in COLOR_NAMES] + [BACKGROUNDS[b] for b in BACKGROUNDS])

# verifier thresholds, fixed against clean renders
PRIMARY_MIN = 0.60
STRIPE_COLOR_MIN = 0.25
STRIPE_MIN_ALTERNATIONS = 3
CORNER_FRAC = 0.2
CORNER_SQUARE_MIN = 0.5

_DESC = re.compile(r"^(a|an) ([a-z]+)(?: and ([a-z]+) striped)? (square|circle)$")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeInstance:
    shape: str
    color: str
    bbox: BBox
    color2: str | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE or (self.color2 is not None and self.color2 not in PALETTE):
            raise ValidationError(f"color outside palette: {self.color}, {self.color2}")
        if (self.shape == "stripes-square") != (self.color2 is not None):
            raise ValidationError("stripes need exactly two colors; solid shapes exactly one")


@dataclass(frozen=True)
class ShapeScene:
    instances: tuple[ShapeInstance, ...]
    background: str = "gray"
    seed: int | None = None


@dataclass(frozen=True)
class SceneConfig:
    min_instances: int = 1
    max_instances: int = 4
    min_size: float = 0.25
    max_size: float = 0.5
    max_iou: float = 0.3
    max_occlusion: float = 0.15   # fraction of a box that later boxes may cover in total
    p_shapes: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    image_size: int = 64
    background: str = "gray"
    max_attempts: int = 1000

    def __post_init__(self):
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValidationError("need 1 <= min_instances <= max_instances")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValidationError("need 0 < min_size <= max_size <= 1")
        if self.background not in BACKGROUNDS:
            raise ValidationError(f"unknown background {self.background!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RenderedSample:
    image: np.ndarray          # (S, S, 3) floats in [0, 1]
    layout: LayoutSpec
    scene: ShapeScene


def _iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _overlap(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    return iw * ih


def gen_scene(rng: np.random.Generator, config: SceneConfig | None = None, seed: int | None = None) -> ShapeScene:
    """Rejection-sample a scene; colors are never reused within a scene."""
    cfg = config or SceneConfig()
    S = cfg.image_size
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    lo, hi = int(np.ceil(cfg.min_size * S)), int(np.floor(cfg.max_size * S))
    boxes: list[BBox] = []
    covered: list[float] = []
    attempts = stalled = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise GenerationError(f"could not place {n} boxes in {cfg.max_attempts} attempts")
        if stalled >= _RESTART_AFTER:
            # early boxes can leave no room; start the placement over
            boxes, covered, stalled = [], [], 0
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x, y = int(rng.integers(0, S - w + 1)), int(rng.integers(0, S - h + 1))
        box = BBox(x / S, y / S, w / S, h / S)
        ov = [_overlap(box, b) for b in boxes]
        if any(_iou(box, b) > cfg.max_iou for b in boxes) or \
                any(c + o > cfg.max_occlusion * b.area for b, c, o in zip(boxes, covered, ov)):
            stalled += 1
            continue
        stalled = 0
        covered = [c + o for c, o in zip(covered, ov)] + [0.0]
        boxes.append(box)
    colors = list(rng.permutation(len(COLOR_NAMES)))
    insts = []
    for k, box in enumerate(boxes):
        shape = SHAPES[int(rng.choice(3, p=cfg.p_shapes))]
        if shape == "stripes-square" and len(colors) - 2 < len(boxes) - k - 1:
            shape = "square"
        c1 = COLOR_NAMES[colors.pop()]
        c2 = COLOR_NAMES[colors.pop()] if shape == "stripes-square" else None
        insts.append(ShapeInstance(shape, c1, box, c2))
    return ShapeScene(tuple(insts), cfg.background, seed)


def _pixel_span(lo: float, extent: float, size: int) -> tuple[int, int]:
    a = int(round(lo * size))
    b = int(round((lo + extent) * size))
    return a, max(b, a + 1)


def render(scene: ShapeScene, size: int = 64) -> np.ndarray:
    """Painter's-order rasterization: later instances draw over earlier ones."""
    img = np.empty((size, size, 3))
    img[:] = BACKGROUNDS[scene.background]
    for inst in scene.instances:
        r0, r1 = _pixel_span(inst.bbox.y, inst.bbox.h, size)
        c0, c1 = _pixel_span(inst.bbox.x, inst.bbox.w, size)
        if inst.shape == "circle":
            yy = (np.arange(r0, r1) + 0.5 - (r0 + r1) / 2) / ((r1 - r0) / 2)
            xx = (np.arange(c0, c1) + 0.5 - (c0 + c1) / 2) / ((c1 - c0) / 2)
            inside = yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0
            img[r0:r1, c0:c1][inside] = PALETTE[inst.color]
        elif inst.shape == "square":
            img[r0:r1, c0:c1] = PALETTE[inst.color]
        else:
            band = ((np.arange(r0, r1) - r0) // STRIPE_PX) % 2
            colors = np.array([PALETTE[inst.color], PALETTE[inst.color2]])
            img[r0:r1, c0:c1] = colors[band][:, None, :]
    return img


def describe(inst: ShapeInstance) -> str:
    if inst.shape == "stripes-square":
        body = f"{inst.color} and {inst.color2} striped square"
    else:
        body = f"{inst.color} {inst.shape}"
    article = "an" if body[0] in "aeiou" else "a"
    return f"{article} {body}"


def caption(descriptions: Sequence[str]) -> str:
    if len(descriptions) <= 1:
        return "".join(descriptions)
    return ", ".join(descriptions[:-1]) + " and " + descriptions[-1]


def scene_layout(scene: ShapeScene) -> LayoutSpec:
    descs = [describe(i) for i in scene.instances]
    return LayoutSpec(caption(descs), tuple(InstanceDescriptor(i.bbox, d) for i, d in zip(scene.instances, descs)))


def make_sample(seed: int, config: SceneConfig | None = None) -> RenderedSample:
    cfg = config or SceneConfig()
    scene = gen_scene(np.random.default_rng(seed), cfg, seed=seed)
    return RenderedSample(render(scene, cfg.image_size), scene_layout(scene), scene)


# verification ------------------------------------------------------------------

@dataclass(frozen=True)
class ParsedDescription:
    color: str
    shape: str
    color2: str | None = None

    @property
    def colors(self) -> tuple[str, ...]:
        return (self.color,) if self.color2 is None else (self.color, self.color2)


def parse_description(text: str) -> ParsedDescription:
    m = _DESC.match(text.strip().lower())
    if not m:
        raise ValidationError(f"description does not follow the template: {text!r}")
    _, c1, c2, shape = m.groups()
    for c in (c1, c2):
        if c is not None and c not in PALETTE:
            raise ValidationError(f"unknown color {c!r} in {text!r}")
    return ParsedDescription(c1, shape, c2)


def palette_labels(image: np.ndarray) -> np.ndarray:
    """Nearest palette/background entry per pixel, as indices into ``label_names()``."""
    img = np.asarray(image, dtype=np.float64)
    d = ((img[..., None, :] - _LABEL_RGB) ** 2).sum(axis=-1)
    return d.argmin(axis=-1)


def label_names() -> tuple[str, ...]:
    return _LABEL_NAMES


def label_index(name: str) -> int:
    return _LABEL_NAMES.index(name)


def crop_box(image: np.ndarray, bbox: BBox) -> np.ndarray:
    H, W = image.shape[:2]
    r0, r1 = _pixel_span(bbox.y, bbox.h, H)
    c0, c1 = _pixel_span(bbox.x, bbox.w, W)
    return image[r0:min(r1, H), c0:min(c1, W)]


def _row_alternations(labels: np.ndarray, a: int, b: int) -> int:
    ca = (labels == a).sum(axis=1)
    cb = (labels == b).sum(axis=1)
    rows = [0 if x >= y else 1 for x, y in zip(ca, cb) if x + y > 0]
    return int(sum(r != s for r, s in zip(rows, rows[1:])))


def _corners(a: np.ndarray, frac: float) -> np.ndarray:
    h, w = a.shape
    kh, kw = max(1, int(round(frac * h))), max(1, int(round(frac * w)))
    return np.concatenate([a[:kh, :kw].ravel(), a[:kh, w - kw:].ravel(),
                           a[h - kh:, :kw].ravel(), a[h - kh:, w - kw:].ravel()])


def corner_occupancy(target: np.ndarray, background: np.ndarray, frac: float = CORNER_FRAC) -> float:
    """Share of corner pixels showing the instance rather than background.

    Corner pixels taken by other colors (occluders) are left out; if every
    corner pixel is occluded the ratio is 1.
    """
    t = _corners(target, frac).sum()
    b = _corners(background, frac).sum()
    return float(t / (t + b)) if t + b else 1.0


def verify(image: np.ndarray, bbox: BBox, description: str) -> bool:
    """Check that the cropped region shows what ``description`` says.

    Raises ``ValidationError`` for descriptions outside the template grammar.
    """
    parsed = parse_description(description)
    labels = palette_labels(crop_box(image, bbox))
    if labels.size == 0:
        return False
    n = labels.size
    frac = {name: float((labels == i).sum()) / n for i, name in enumerate(_LABEL_NAMES)}
    target = np.isin(labels, [label_index(c) for c in parsed.colors])
    if parsed.color2 is None:
        fg = {c: v for c, v in frac.items() if c in PALETTE}
        if frac[parsed.color] < PRIMARY_MIN or max(fg, key=fg.get) != parsed.color:
            return False
    else:
        f1, f2 = frac[parsed.color], frac[parsed.color2]
        if f1 < STRIPE_COLOR_MIN or f2 < STRIPE_COLOR_MIN or f1 + f2 < PRIMARY_MIN:
            return False
        if _row_alternations(labels, label_index(parsed.color), label_index(parsed.color2)) < STRIPE_MIN_ALTERNATIONS:
            return False
    background = np.isin(labels, [label_index(b) for b in BACKGROUNDS])
    is_square = corner_occupancy(target, background) >= CORNER_SQUARE_MIN
    return is_square == (parsed.shape == "square")


def always_true(image, bbox, description) -> bool:
    return True


def always_false(image, bbox, description) -> bool:
    return False


# corpus on disk ----------------------------------------------------------------

def sample_seed(base_seed: int, split: str, index: int) -> int:
    split_key = int.from_bytes(split.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return int(np.random.SeedSequence([base_seed, split_key, index]).generate_state(1)[0])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_split(root, split: str, n: int, base_seed: int, config: SceneConfig) -> Path:
    """Write ``n`` samples of one split: images/, layouts/, manifest.jsonl."""
    if n < 1:
        raise ValidationError(f"split {split!r} needs at least one sample, got {n}", f"n_{split}")
    out = Path(root) / split
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        seed = sample_seed(base_seed, split, i)
        s = make_sample(seed, config)
        img_rel, lay_rel = f"images/{i:06d}.png", f"layouts/{i:06d}.json"
        save_png(s.image, out / img_rel)
        s.layout.save(out / lay_rel)
        lines.append(json.dumps({"image_path": img_rel, "layout_path": lay_rel, "seed": seed}, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "scene_config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n",
                                           encoding="utf-8")
    return out


@dataclass
class Corpus:
    root: Path
    images: list[np.ndarray] = field(default_factory=list)
    layouts: list[LayoutSpec] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layouts)


def load_split(path) -> Corpus:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    corpus = Corpus(root)
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        corpus.images.append(load_png(root / rec["image_path"]))
        corpus.layouts.append(LayoutSpec.load(root / rec["layout_path"]))
        corpus.seeds.append(int(rec["seed"]))
    return corpus
