"""Annotation stage: the HTTP client for a remote teacher, response
post-filtering, crop-to-frame remapping and the RoI-size sweep.

Wire protocol (one image per request)::

    POST {endpoint}/annotate
    Content-Type: image/png
    X-Request-Id: <opaque>
    X-Frame-Id: <source frame id>
    X-Crop-Offset: <x>,<y>          (crop origin in frame pixels)
    body: PNG bytes of the crop

    200 {"detections": [{"label": "person", "score": 0.91,
                         "box": [ymin, xmin, ymax, xmax]}],
         "model": "..."}

Boxes on the wire are normalized to the crop. 4xx is final, 5xx and
timeouts are retried with exponential backoff.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from .capture import encode_png
from .errors import AnnotationError, AnnotationUnavailable, ProtocolError
from .geometry import BoundingBox, Detection, Frame, clamp_box, iou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnotatorConfig:
    endpoint: str = "http://127.0.0.1:8500"
    min_confidence: float = 0.3
    target_classes: tuple[str, ...] = ()
    timeout_ms: int = 10_000
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_ms: int = 100

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValueError(f"min_confidence must be in [0,1], got {self.min_confidence}")
        if not self.target_classes:
            raise ValueError("target_classes must not be empty")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0 or self.timeout_ms <= 0:
            raise ValueError("max_retries must be >= 0 and timeout_ms > 0")


@dataclass
class AnnotationRequest:
    frame_id: str
    crop: np.ndarray = field(repr=False)
    offset: tuple[int, int] = (0, 0)
    frame_width: int = 0
    frame_height: int = 0
    request_id: str = ""

    def __post_init__(self) -> None:
        h, w = self.crop.shape[:2]
        if not self.frame_width:
            self.frame_width = self.offset[0] + w
        if not self.frame_height:
            self.frame_height = self.offset[1] + h
        x, y = self.offset
        if x < 0 or y < 0 or x + w > self.frame_width or y + h > self.frame_height:
            raise ValueError(f"crop {w}x{h} at {self.offset} exceeds frame {self.frame_width}x{self.frame_height}")

    @property
    def crop_width(self) -> int:
        return int(self.crop.shape[1])

    @property
    def crop_height(self) -> int:
        return int(self.crop.shape[0])

    @property
    def crop_box(self) -> BoundingBox:
        x, y = self.offset
        return BoundingBox(x, y, x + self.crop_width, y + self.crop_height)

    @cached_property
    def png(self) -> bytes:
        return encode_png(self.crop)

    @classmethod
    def for_region(cls, frame: Frame, region: BoundingBox, request_id: str = "") -> "AnnotationRequest":
        x0, y0 = int(region.x_min), int(region.y_min)
        x1, y1 = int(region.x_max), int(region.y_max)
        return cls(frame.frame_id, frame.pixels[y0:y1, x0:x1], (x0, y0), frame.width, frame.height, request_id)


@dataclass
class AnnotatedItem:
    frame_id: str
    offset: tuple[int, int]
    crop_size: tuple[int, int]
    detections: list[Detection]
    latency_ms: float = 0.0
    request_id: str = ""
    bytes_sent: int = 0


@dataclass(frozen=True)
class RawDetection:
    """A detection as received on the wire: normalized crop coordinates."""

    label: str
    score: float
    box: tuple[float, float, float, float]  # ymin, xmin, ymax, xmax


def remap_to_frame(
    box: Sequence[float],
    offset: tuple[float, float],
    crop_w: float,
    crop_h: float,
    frame_w: float | None = None,
    frame_h: float | None = None,
) -> BoundingBox:
    """Normalized crop box ``[ymin, xmin, ymax, xmax]`` to frame pixels."""
    if len(box) != 4:
        raise ProtocolError(f"box must have 4 coordinates, got {list(box)!r}")
    ymin, xmin, ymax, xmax = (float(v) for v in box)
    if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in (ymin, xmin, ymax, xmax)):
        raise ProtocolError(f"box coordinates must be normalized to [0,1]: {list(box)!r}")
    if ymin > ymax or xmin > xmax:
        raise ProtocolError(f"inverted box {list(box)!r}")
    ox, oy = offset
    out = BoundingBox(ox + xmin * crop_w, oy + ymin * crop_h, ox + xmax * crop_w, oy + ymax * crop_h)
    if frame_w is not None and frame_h is not None:
        out = clamp_box(out, frame_w, frame_h)
    return out


def normalize_to_crop(box: BoundingBox, offset: tuple[float, float], crop_w: float, crop_h: float) -> list[float]:
    """Inverse of :func:`remap_to_frame` (without clamping)."""
    ox, oy = offset
    return [
        (box.y_min - oy) / crop_h,
        (box.x_min - ox) / crop_w,
        (box.y_max - oy) / crop_h,
        (box.x_max - ox) / crop_w,
    ]


def parse_response(content: bytes | str) -> list[RawDetection]:
    def excerpt() -> str:
        text = content.decode("utf-8", "replace") if isinstance(content, bytes) else content
        return text[:200]

    try:
        doc = json.loads(content)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"response is not JSON ({exc}): {excerpt()!r}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("detections"), list):
        raise ProtocolError(f"response lacks a 'detections' list: {excerpt()!r}")
    out = []
    for i, d in enumerate(doc["detections"]):
        try:
            label, score, box = d["label"], d["score"], d["box"]
        except (TypeError, KeyError):
            raise ProtocolError(f"detections[{i}] needs label, score and box: {excerpt()!r}") from None
        if not isinstance(label, str) or isinstance(score, bool) or not isinstance(score, (int, float)):
            raise ProtocolError(f"detections[{i}] has a bad label or score: {excerpt()!r}")
        if not 0.0 <= score <= 1.0:
            raise ProtocolError(f"detections[{i}].score out of [0,1]: {score}")
        if not isinstance(box, list) or len(box) != 4 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in box
        ):
            raise ProtocolError(f"detections[{i}].box must be 4 numbers: {excerpt()!r}")
        out.append(RawDetection(label, float(score), tuple(float(v) for v in box)))
    return out


def to_annotated_item(
    req: AnnotationRequest,
    raw: Iterable[RawDetection],
    min_confidence: float,
    target_classes: Iterable[str],
    latency_ms: float = 0.0,
    bytes_sent: int = 0,
) -> AnnotatedItem:
    """Drop low-confidence and off-target detections, remap the rest to frame pixels."""
    targets = set(target_classes)
    dets = []
    for r in raw:
        box = remap_to_frame(r.box, req.offset, req.crop_width, req.crop_height, req.frame_width, req.frame_height)
        if r.score < min_confidence or r.label not in targets:
            continue
        dets.append(Detection(box, r.label, r.score))
    return AnnotatedItem(
        req.frame_id, req.offset, (req.crop_width, req.crop_height), dets, latency_ms, req.request_id, bytes_sent
    )


class Annotator:
    """Anything that turns an :class:`AnnotationRequest` into an
    :class:`AnnotatedItem`. Implementations must be thread-safe."""

    def annotate(self, req: AnnotationRequest) -> AnnotatedItem:
        raise NotImplementedError

    def close(self) -> None:
        pass


class HttpAnnotator(Annotator):
    def __init__(self, cfg: AnnotatorConfig, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self._sleep = sleep
        self._client = httpx.Client(timeout=cfg.timeout_ms / 1000.0)
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)
        self._url = cfg.endpoint.rstrip("/") + "/annotate"

    def close(self) -> None:
        self._client.close()

    def annotate(self, req: AnnotationRequest) -> AnnotatedItem:
        body = req.png
        headers = {
            "Content-Type": "image/png",
            "X-Request-Id": req.request_id,
            "X-Frame-Id": req.frame_id,
            "X-Crop-Offset": f"{req.offset[0]},{req.offset[1]}",
        }
        cfg = self.cfg
        failures: list[str] = []
        unreachable = True
        with self._slots:
            for attempt in range(cfg.max_retries + 1):
                if attempt:
                    self._sleep(cfg.backoff_ms / 1000.0 * 2 ** (attempt - 1))
                t0 = time.perf_counter()
                try:
                    resp = self._client.post(self._url, content=body, headers=headers)
                except httpx.ConnectError as exc:
                    failures.append(f"connect: {exc}")
                    continue
                except httpx.TransportError as exc:
                    unreachable = False
                    failures.append(f"{type(exc).__name__}: {exc}")
                    continue
                unreachable = False
                latency = (time.perf_counter() - t0) * 1000.0
                if resp.status_code == 200:
                    raw = parse_response(resp.content)
                    try:
                        return to_annotated_item(
                            req, raw, cfg.min_confidence, cfg.target_classes, latency, len(body)
                        )
                    except ValueError as exc:
                        raise ProtocolError(str(exc)) from None
                if 400 <= resp.status_code < 500:
                    raise AnnotationError(
                        f"request {req.request_id!r} rejected with {resp.status_code}: {resp.text[:200]!r}"
                    )
                failures.append(f"HTTP {resp.status_code}")
        detail = "; ".join(failures[-3:])
        if unreachable:
            raise AnnotationUnavailable(f"{self._url} unreachable after {len(failures)} attempts ({detail})")
        raise AnnotationError(f"request {req.request_id!r} failed after {len(failures)} attempts ({detail})")


# -- RoI-size sweep ----------------------------------------------------------

FULL_FRAME = "full"


@dataclass
class RoiRow:
    scale: str
    mean_confidence: float | None
    samples: int
    missing: int
    mean_roi_side: float


def square_roi(box: BoundingBox, scale: float | str, width: int, height: int) -> BoundingBox:
    """Square of side ``scale * max(w, h)`` centered on ``box``, clamped to
    the frame and snapped outward to whole pixels. ``"full"`` is the frame."""
    if scale == FULL_FRAME:
        return BoundingBox(0, 0, width, height)
    scale = float(scale)
    if scale < 1:
        raise ValueError(f"RoI scale must be >= 1, got {scale}")
    side = scale * max(box.width, box.height)
    cx, cy = box.center
    b = clamp_box(BoundingBox(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2), width, height)
    return BoundingBox(math.floor(b.x_min), math.floor(b.y_min), math.ceil(b.x_max), math.ceil(b.y_max))


def roi_sweep(
    samples: Sequence[tuple[Frame, BoundingBox]],
    scales: Sequence[float | str],
    annotator: Annotator,
) -> list[RoiRow]:
    """Teacher confidence on one object as the RoI around it grows.

    A sample reuses one request id at every scale, so a seeded teacher
    draws the same random numbers for it each time.
    """
    rows = []
    for scale in scales:
        confs, sides, missing = [], [], 0
        for i, (frame, obj) in enumerate(samples):
            roi = square_roi(obj, scale, frame.width, frame.height)
            sides.append(max(roi.width, roi.height))
            req = AnnotationRequest.for_region(frame, roi, request_id=f"roi-{i}")
            try:
                item = annotator.annotate(req)
            except AnnotationError as exc:
                log.warning("roi sweep: scale %s sample %d failed: %s", scale, i, exc)
                missing += 1
                continue
            best = max(
                ((iou(d.box, obj), d.score) for d in item.detections),
                default=(0.0, 0.0),
            )
            confs.append(best[1] if best[0] > 0 else 0.0)
        rows.append(RoiRow(
            str(scale),
            float(np.mean(confs)) if confs else None,
            len(samples),
            missing,
            float(np.mean(sides)) if sides else 0.0,
        ))
    return rows


def write_roi_csv(rows: Sequence[RoiRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["scale", "mean_confidence", "samples", "missing", "mean_roi_side"])
    for r in rows:
        conf = "" if r.mean_confidence is None else f"{r.mean_confidence:.6f}"
        w.writerow([r.scale, conf, r.samples, r.missing, f"{r.mean_roi_side:.1f}"])
