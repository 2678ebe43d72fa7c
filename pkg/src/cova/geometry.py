"""Domain types shared by every stage, plus exact box geometry.

Boxes are always absolute pixel coordinates in corner form
``(x_min, y_min, x_max, y_max)`` with the origin at the top-left corner.
Wire and file formats convert at their own boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    def expand(self, pad: float) -> "BoundingBox":
        return BoundingBox(self.x_min - pad, self.y_min - pad, self.x_max + pad, self.y_max + pad)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def intersection(self, other: "BoundingBox") -> "BoundingBox | None":
        x0 = max(self.x_min, other.x_min)
        y0 = max(self.y_min, other.y_min)
        x1 = min(self.x_max, other.x_max)
        y1 = min(self.y_max, other.y_max)
        if x0 > x1 or y0 > y1:
            return None
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: str
    score: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0,1]: {self.score}")


@dataclass(frozen=True)
class GroundTruthObject:
    box: BoundingBox
    label: str


@dataclass(frozen=True)
class Frame:
    """A decoded RGB frame. ``pixels`` is an H x W x 3 uint8 array."""

    stream_id: str
    index: int
    timestamp_ms: int
    pixels: np.ndarray = field(repr=False)
    frame_id: str = ""

    def __post_init__(self) -> None:
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame pixels must be HxWx3 uint8, got {px.dtype} {px.shape}")
        if not self.frame_id:
            object.__setattr__(self, "frame_id", f"{self.stream_id}_{self.index:06d}")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


class LabelMap:
    """Ordered class names with contiguous ids starting at 1."""

    def __init__(self, names: Iterable[str]):
        self._names = list(names)
        if len(set(self._names)) != len(self._names):
            raise ValueError(f"duplicate class names in label map: {self._names}")
        if not all(isinstance(n, str) and n for n in self._names):
            raise ValueError("class names must be non-empty strings")
        self._ids = {name: i + 1 for i, name in enumerate(self._names)}

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, str]]) -> "LabelMap":
        pairs = sorted(pairs)
        ids = [cid for cid, _ in pairs]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must be unique and contiguous from 1, got {ids}")
        return cls(name for _, name in pairs)

    def names(self) -> list[str]:
        return list(self._names)

    def pairs(self) -> list[tuple[int, str]]:
        return [(i + 1, n) for i, n in enumerate(self._names)]

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown class {name!r}") from None

    def name_of(self, class_id: int) -> str:
        if not 1 <= class_id <= len(self._names):
            raise KeyError(f"unknown class id {class_id}")
        return self._names[class_id - 1]

    def __contains__(self, name: object) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelMap) and self._names == other._names

    def __repr__(self) -> str:
        return f"LabelMap({self._names!r})"


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union. Zero-area boxes give 0, never NaN."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def clamp_box(b: BoundingBox, width: float, height: float) -> BoundingBox:
    """Clip every coordinate into the frame. A box fully outside collapses
    to a zero-area box on the nearest edge; callers check ``area``."""
    if width <= 0 or height <= 0:
        raise ValueError(f"frame dimensions must be positive, got {width}x{height}")
    return BoundingBox(
        min(max(b.x_min, 0.0), width),
        min(max(b.y_min, 0.0), height),
        min(max(b.x_max, 0.0), width),
        min(max(b.y_max, 0.0), height),
    )


def union_area(boxes: Sequence[BoundingBox], width: int, height: int) -> int:
    """Exact pixel area of the union of boxes, by rasterizing into a mask.

    Pixel (x, y) covers [x, x+1) x [y, y+1); a box covers the pixels whose
    centers it contains, which is exact for integer-aligned boxes.
    """
    if not boxes:
        return 0
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        x0 = max(0, int(math.ceil(b.x_min - 0.5)))
        y0 = max(0, int(math.ceil(b.y_min - 0.5)))
        x1 = min(width, int(math.ceil(b.x_max - 0.5)))
        y1 = min(height, int(math.ceil(b.y_max - 0.5)))
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = True
    return int(mask.sum())
