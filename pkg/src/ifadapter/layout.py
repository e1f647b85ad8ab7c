"""Layout conditions: normalized boxes, their latent-grid regions and masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn.autograd import NEG_INF, DimensionError

_TOL = 1e-9
DEFAULT_MAX_INSTANCES = 10


class ValidationError(ValueError):
    """Invalid user-supplied condition; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box ``[x, y, w, h]`` in canvas-normalized coordinates."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box needs positive size, got w={self.w}, h={self.h}")
        if self.x < -_TOL or self.y < -_TOL:
            raise ValidationError(f"box origin outside canvas: {vals}")
        if self.x + self.w > 1 + _TOL or self.y + self.h > 1 + _TOL:
            raise ValidationError(f"box extends past canvas: {vals}")

    @classmethod
    def from_list(cls, v: Sequence[float], path: str = "box") -> "BBox":
        if not isinstance(v, (list, tuple)) or len(v) != 4:
            raise ValidationError("expected [x, y, w, h]", path)
        try:
            return cls(*(float(t) for t in v))
        except (TypeError, ValueError) as exc:
            raise ValidationError(str(exc), path) from None

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class InstanceDescriptor:
    bbox: BBox
    description: str

    def __post_init__(self):
        if not isinstance(self.description, str) or not self.description.strip():
            raise ValidationError("description must be a non-empty string")


@dataclass(frozen=True)
class LayoutSpec:
    """Global caption plus an ordered list of instance (box, description) pairs."""

    global_caption: str
    instances: tuple[InstanceDescriptor, ...] = field(default_factory=tuple)
    max_instances: int = DEFAULT_MAX_INSTANCES

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if len(self.instances) > self.max_instances:
            raise ValidationError(f"{len(self.instances)} instances exceeds maximum {self.max_instances}",
                                  "instances")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def boxes(self) -> list[BBox]:
        return [inst.bbox for inst in self.instances]

    @property
    def descriptions(self) -> list[str]:
        return [inst.description for inst in self.instances]

    def without_instances(self) -> "LayoutSpec":
        return LayoutSpec(self.global_caption, (), self.max_instances)

    def to_json(self) -> dict:
        return {"caption": self.global_caption,
                "instances": [{"box": i.bbox.as_list(), "desc": i.description} for i in self.instances]}

    @classmethod
    def from_json(cls, obj, max_instances: int = DEFAULT_MAX_INSTANCES) -> "LayoutSpec":
        if not isinstance(obj, dict):
            raise ValidationError("layout must be a JSON object", "$")
        caption = obj.get("caption")
        if not isinstance(caption, str):
            raise ValidationError("missing or non-string caption", "caption")
        raw = obj.get("instances", [])
        if not isinstance(raw, list):
            raise ValidationError("instances must be a list", "instances")
        insts = []
        for k, item in enumerate(raw):
            path = f"instances[{k}]"
            if not isinstance(item, dict):
                raise ValidationError("instance must be an object", path)
            box = BBox.from_list(item.get("box"), f"{path}.box")
            desc = item.get("desc")
            if not isinstance(desc, str) or not desc.strip():
                raise ValidationError("desc must be a non-empty string", f"{path}.desc")
            insts.append(InstanceDescriptor(box, desc))
        return cls(caption, tuple(insts), max_instances)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, max_instances: int = DEFAULT_MAX_INSTANCES) -> "LayoutSpec":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc}", "$") from None
        return cls.from_json(obj, max_instances)


def rasterize(bbox: BBox, h_lat: int, w_lat: int) -> np.ndarray:
    """Binary (h_lat, w_lat) region: cells whose centers fall inside the box.

    A box too small to contain any cell center still claims the single cell
    holding its own center, so every valid box has a non-empty region.
    """
    if h_lat < 1 or w_lat < 1:
        raise ValidationError(f"grid must be at least 1x1, got {h_lat}x{w_lat}")
    if not isinstance(bbox, BBox):
        raise ValidationError("rasterize expects a BBox")
    cy = (np.arange(h_lat) + 0.5) / h_lat
    cx = (np.arange(w_lat) + 0.5) / w_lat
    rows = (cy >= bbox.y) & (cy < bbox.y2)
    cols = (cx >= bbox.x) & (cx < bbox.x2)
    grid = (rows[:, None] & cols[None, :]).astype(np.uint8)
    if not grid.any():
        r = min(int((bbox.y + bbox.h / 2) * h_lat), h_lat - 1)
        c = min(int((bbox.x + bbox.w / 2) * w_lat), w_lat - 1)
        grid[r, c] = 1
    return grid


def additive_mask(region: np.ndarray) -> np.ndarray:
    """Flattened 0 / NEG_INF mask: 0 on the region, sentinel elsewhere."""
    region = np.asarray(region)
    return np.where(region.reshape(-1) > 0, 0.0, NEG_INF)


def _stack(regions: Iterable[np.ndarray]) -> np.ndarray:
    regions = [np.asarray(r) for r in regions]
    if not regions:
        raise ValueError("need at least one region")
    shape = regions[0].shape
    for r in regions:
        if r.shape != shape:
            raise DimensionError(f"region shapes differ: {r.shape} vs {shape}")
    return np.stack(regions) > 0


def instance_area(region: np.ndarray) -> int:
    return int(np.count_nonzero(region))


def union_area(regions: Sequence[np.ndarray]) -> int:
    return int(np.count_nonzero(_stack(regions).any(axis=0)))


def background_mask(regions: Sequence[np.ndarray], shape: tuple[int, int] | None = None) -> np.ndarray:
    """1 where no region covers the cell. ``shape`` is needed when ``regions`` is empty."""
    if len(regions) == 0:
        if shape is None:
            raise ValueError("shape is required for an empty layout")
        return np.ones(shape)
    cover = _stack(regions).any(axis=0)
    if shape is not None and cover.shape != tuple(shape):
        raise DimensionError(f"regions {cover.shape} vs requested {shape}")
    return (~cover).astype(np.float64)


def layout_regions(layout: LayoutSpec, h_lat: int, w_lat: int) -> list[np.ndarray]:
    return [rasterize(b, h_lat, w_lat) for b in layout.boxes]
