"""Frame filters: pass-through, static-frame removal and moving-region crops.

Every emitted crop is an exact sub-rectangle of its source frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import imageproc
from .background import MOG, BackgroundModel, BackgroundParams
from .geometry import BoundingBox, Frame, clamp_box, iou, union_area

PER_REGION = "per_region"
ENCLOSING_BOX = "enclosing_box"
MODES = (PER_REGION, ENCLOSING_BOX)

DEFAULT_MIN_AREA_FRACTION = 0.001


@dataclass(frozen=True)
class MotionRegion:
    box: BoundingBox
    area: int
    source_frame: int


@dataclass(frozen=True)
class FilterItem:
    """A crop handed to the annotator. ``region`` is in frame coordinates
    and ``offset`` is its top-left corner."""

    frame: Frame
    region: BoundingBox
    crop_index: int = 0

    @property
    def offset(self) -> tuple[int, int]:
        return int(self.region.x_min), int(self.region.y_min)

    @property
    def crop(self) -> np.ndarray:
        x0, y0 = self.offset
        x1, y1 = int(self.region.x_max), int(self.region.y_max)
        return self.frame.pixels[y0:y1, x0:x1]

    @property
    def is_full_frame(self) -> bool:
        return self.region == BoundingBox(0, 0, self.frame.width, self.frame.height)


FilterOutput = list  # list[FilterItem]


@dataclass
class MotionDetector:
    """Background model + dilation + component extraction for one stream.

    ``min_area`` is in pixels; ``None`` means 0.1% of the frame area.
    """

    variant: str = MOG
    params: BackgroundParams = field(default_factory=BackgroundParams)
    dilate_radius: int = 1
    dilate_iterations: int = 2
    min_area: int | None = None

    def __post_init__(self) -> None:
        self.model = BackgroundModel(self.variant, self.params)

    def min_area_for(self, width: int, height: int) -> int:
        if self.min_area is not None:
            return int(self.min_area)
        return max(1, int(math.ceil(DEFAULT_MIN_AREA_FRACTION * width * height)))

    def foreground(self, frame: Frame | np.ndarray) -> np.ndarray:
        gray = imageproc.to_gray(frame) if isinstance(frame, Frame) or np.ndim(frame) == 3 else frame
        mask = self.model.update_and_classify(gray)
        return imageproc.dilate(mask, self.dilate_radius, self.dilate_iterations)

    def detect(self, frame: Frame) -> tuple[np.ndarray, list[MotionRegion]]:
        """Dilated foreground mask and the regions that pass ``min_area``."""
        mask = self.foreground(frame)
        threshold = self.min_area_for(frame.width, frame.height)
        regions = [
            MotionRegion(box, area, frame.index)
            for box, area in imageproc.connected_components(mask)
            if area >= threshold
        ]
        return mask, regions

    def regions(self, frame: Frame) -> list[MotionRegion]:
        return self.detect(frame)[1]


def _integer_box(b: BoundingBox, width: int, height: int) -> BoundingBox:
    c = clamp_box(b, width, height)
    return BoundingBox(
        float(math.floor(c.x_min)), float(math.floor(c.y_min)),
        float(math.ceil(c.x_max)), float(math.ceil(c.y_max)),
    )


def filter_no_op(frame: Frame) -> list[FilterItem]:
    return [FilterItem(frame, BoundingBox(0, 0, frame.width, frame.height))]


def filter_static(frame: Frame, detector: MotionDetector) -> list[FilterItem]:
    """The whole frame if any region survives the area threshold, else nothing."""
    if detector.regions(frame):
        return filter_no_op(frame)
    return []


def crops_for_regions(
    frame: Frame, regions: list[MotionRegion], mode: str = PER_REGION, padding: int = 8
) -> list[FilterItem]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not regions:
        return []
    if mode == ENCLOSING_BOX:
        boxes = [BoundingBox(
            min(r.box.x_min for r in regions), min(r.box.y_min for r in regions),
            max(r.box.x_max for r in regions), max(r.box.y_max for r in regions),
        )]
    else:
        boxes = [r.box for r in regions]
    items = []
    for box in boxes:
        b = _integer_box(box.expand(padding), frame.width, frame.height)
        if b.area > 0:
            items.append(FilterItem(frame, b, len(items)))
    return items


def filter_moving_regions(
    frame: Frame, detector: MotionDetector, mode: str = PER_REGION, padding: int = 8
) -> list[FilterItem]:
    return crops_for_regions(frame, detector.regions(frame), mode, padding)


class RegionDeduplicator:
    """Drops a crop that is too similar to the latest kept crop of the same
    region (region boxes overlapping by IoU >= ``min_iou``). Crops are
    compared at a fixed size with nearest-neighbour resampling."""

    def __init__(
        self,
        threshold: float,
        min_iou: float = 0.5,
        compare_size: tuple[int, int] = (32, 32),
        history: int = 64,
    ):
        self.threshold = float(threshold)
        self.min_iou = min_iou
        self.compare_size = compare_size
        self.history_size = history
        self.history: list[tuple[BoundingBox, np.ndarray]] = []

    def _thumb(self, crop: np.ndarray) -> np.ndarray:
        w, h = self.compare_size
        return imageproc.resize_nearest(crop, w, h)

    def keep(self, item: FilterItem) -> bool:
        thumb = self._thumb(item.crop)
        for box, prev in reversed(self.history):
            if iou(box, item.region) >= self.min_iou:
                if imageproc.mse(thumb, prev) < self.threshold:
                    return False
                break
        self.history.append((item.region, thumb))
        del self.history[: -self.history_size]
        return True


def dedup_mse(candidate: FilterItem, dedup: RegionDeduplicator) -> bool:
    """True to keep the candidate, False to drop it."""
    return dedup.keep(candidate)


@dataclass
class CoverageReport:
    per_frame: list[float]
    average: float


def motion_coverage(frames: Iterable[Frame], detector: MotionDetector) -> CoverageReport:
    """Fraction of each frame covered by the union of surviving region
    boxes; the average is over frames with at least one region (0 if none)."""
    per_frame = []
    with_motion = []
    for frame in frames:
        regions = detector.regions(frame)
        cov = union_area([r.box for r in regions], frame.width, frame.height) / float(frame.width * frame.height)
        per_frame.append(cov)
        if regions:
            with_motion.append(cov)
    avg = float(np.mean(with_motion)) if with_motion else 0.0
    return CoverageReport(per_frame, avg)
