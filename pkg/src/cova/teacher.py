"""A stand-in annotation service that answers from ground-truth files.

It speaks the same wire protocol as the real teacher and can degrade its
answers (sampled scores, localization jitter, missed small objects) to
imitate an imperfect detector. Randomness is derived from
``(seed, request id)`` alone, so answers do not depend on request order.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .annotate import AnnotatedItem, AnnotationRequest, Annotator, parse_response, to_annotated_item
from .errors import GroundTruthError
from .geometry import BoundingBox, GroundTruthObject, LabelMap

log = logging.getLogger(__name__)

MIN_OVERLAP = 0.3  # fraction of a GT object's area that must fall inside the crop
MODEL_NAME = "ground-truth-stub"


@dataclass(frozen=True)
class DegradationProfile:
    """``confidence_law`` is ``(a, b)`` of a Beta law, or None for score 1.0.
    Objects with ``area / crop_area < small_area_fraction`` are missed with
    probability ``drop_probability``. ``jitter_sigma`` scales Gaussian
    corner noise by the box width/height."""

    seed: int = 0
    confidence_law: tuple[float, float] | None = None
    small_area_fraction: float = 0.0
    drop_probability: float = 0.0
    jitter_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop_probability must be in [0,1], got {self.drop_probability}")
        if not 0.0 <= self.small_area_fraction <= 1.0:
            raise ValueError(f"small_area_fraction must be in [0,1], got {self.small_area_fraction}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.confidence_law is not None:
            a, b = self.confidence_law
            if a <= 0 or b <= 0:
                raise ValueError(f"Beta parameters must be positive, got {self.confidence_law}")

    @property
    def is_perfect(self) -> bool:
        return self.confidence_law is None and self.drop_probability == 0 and self.jitter_sigma == 0

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DegradationProfile":
        law = d.get("confidence_law")
        if isinstance(law, dict):
            law = (float(law["a"]), float(law["b"]))
        elif law is not None:
            law = (float(law[0]), float(law[1]))
        fn = d.get("fn_small_object") or {}
        return cls(
            seed=int(d.get("seed", 0)),
            confidence_law=law,
            small_area_fraction=float(fn.get("area_threshold", 0.0)),
            drop_probability=float(fn.get("drop_probability", 0.0)),
            jitter_sigma=float(d.get("jitter_sigma", 0.0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "DegradationProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "confidence_law": None if self.confidence_law is None
            else {"a": self.confidence_law[0], "b": self.confidence_law[1]},
            "fn_small_object": {"area_threshold": self.small_area_fraction,
                                "drop_probability": self.drop_probability},
            "jitter_sigma": self.jitter_sigma,
        }


PERFECT = DegradationProfile()


@dataclass
class GroundTruthStore:
    """Ground truth keyed by image file name (the frame id)."""

    label_map: LabelMap
    objects: dict[str, list[GroundTruthObject]] = field(default_factory=dict)
    sizes: dict[str, tuple[int, int]] = field(default_factory=dict)
    image_ids: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sizes)

    def __contains__(self, frame_id: object) -> bool:
        return frame_id in self.sizes

    def frame_ids(self) -> list[str]:
        return list(self.sizes)

    def get(self, frame_id: str) -> list[GroundTruthObject]:
        return self.objects.get(frame_id, [])


def _need(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise GroundTruthError(path, msg)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def parse_ground_truth(doc: Any) -> GroundTruthStore:
    _need(isinstance(doc, dict), "$", "expected a JSON object")
    for key in ("images", "annotations", "categories"):
        _need(isinstance(doc.get(key), list), f"$.{key}", "missing or not a list")

    cats: dict[int, str] = {}
    for i, c in enumerate(doc["categories"]):
        p = f"$.categories[{i}]"
        _need(isinstance(c, dict), p, "expected an object")
        _need(_is_int(c.get("id")), f"{p}.id", "expected an integer")
        _need(isinstance(c.get("name"), str) and c["name"] != "", f"{p}.name", "expected a non-empty string")
        _need(c["id"] not in cats, f"{p}.id", f"duplicate category id {c['id']}")
        _need(c["name"] not in cats.values(), f"{p}.name", f"duplicate category name {c['name']!r}")
        cats[c["id"]] = c["name"]
    label_map = LabelMap(cats[k] for k in sorted(cats))

    images: dict[int, str] = {}
    sizes: dict[str, tuple[int, int]] = {}
    for i, im in enumerate(doc["images"]):
        p = f"$.images[{i}]"
        _need(isinstance(im, dict), p, "expected an object")
        _need(_is_int(im.get("id")), f"{p}.id", "expected an integer")
        _need(im["id"] not in images, f"{p}.id", f"duplicate image id {im['id']}")
        _need(isinstance(im.get("file_name"), str) and im["file_name"] != "", f"{p}.file_name",
              "expected a non-empty string")
        _need(im["file_name"] not in sizes, f"{p}.file_name", f"duplicate file name {im['file_name']!r}")
        for k in ("width", "height"):
            _need(_is_int(im.get(k)) and im[k] > 0, f"{p}.{k}", "expected a positive integer")
        images[im["id"]] = im["file_name"]
        sizes[im["file_name"]] = (im["width"], im["height"])

    objects: dict[str, list[GroundTruthObject]] = {}
    seen: set[int] = set()
    for i, a in enumerate(doc["annotations"]):
        p = f"$.annotations[{i}]"
        _need(isinstance(a, dict), p, "expected an object")
        _need(_is_int(a.get("id")), f"{p}.id", "expected an integer")
        _need(a["id"] not in seen, f"{p}.id", f"duplicate annotation id {a['id']}")
        seen.add(a["id"])
        _need(a.get("image_id") in images, f"{p}.image_id", f"references unknown image id {a.get('image_id')!r}")
        _need(a.get("category_id") in cats, f"{p}.category_id",
              f"references unknown category id {a.get('category_id')!r}")
        bbox = a.get("bbox")
        _need(isinstance(bbox, list) and len(bbox) == 4 and all(_is_num(v) for v in bbox), f"{p}.bbox",
              "expected [x, y, width, height]")
        x, y, w, h = (float(v) for v in bbox)
        _need(w >= 0 and h >= 0, f"{p}.bbox", "negative width or height")
        name = images[a["image_id"]]
        fw, fh = sizes[name]
        eps = 1e-6
        _need(x >= -eps and y >= -eps and x + w <= fw + eps and y + h <= fh + eps, f"{p}.bbox",
              f"box {bbox} exceeds image {fw}x{fh}")
        objects.setdefault(name, []).append(GroundTruthObject(BoundingBox.from_xywh(x, y, w, h), cats[a["category_id"]]))
    return GroundTruthStore(label_map, objects, sizes, images)


def load_ground_truth(path: str | Path) -> GroundTruthStore:
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise GroundTruthError(str(path), f"cannot read ground truth: {exc}") from None
    return parse_ground_truth(doc)


def request_rng(seed: int, request_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{request_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class Teacher:
    """The response logic, independent of HTTP."""

    def __init__(self, store: GroundTruthStore, profile: DegradationProfile = PERFECT):
        self.store = store
        self.profile = profile

    def detections(
        self, frame_id: str, offset: tuple[int, int], crop_w: int, crop_h: int, request_id: str
    ) -> list[dict[str, Any]]:
        if frame_id not in self.store:
            log.info("unknown frame id %r; answering with no detections", frame_id)
            return []
        prof = self.profile
        rng = request_rng(prof.seed, request_id)
        ox, oy = offset
        crop = BoundingBox(ox, oy, ox + crop_w, oy + crop_h)
        crop_area = float(crop_w * crop_h)
        out = []
        for obj in self.store.get(frame_id):
            # fixed draw count per object keeps later objects' draws stable
            u = rng.random()
            noise = rng.standard_normal(4)
            score = float(rng.beta(*prof.confidence_law)) if prof.confidence_law else 1.0

            b = obj.box
            inside = b.intersection(crop)
            if b.area <= 0 or inside is None or inside.area < MIN_OVERLAP * b.area:
                continue
            if b.area / crop_area < prof.small_area_fraction and u < prof.drop_probability:
                continue
            if prof.jitter_sigma > 0:
                sx, sy = prof.jitter_sigma * b.width, prof.jitter_sigma * b.height
                xs = sorted((b.x_min + noise[0] * sx, b.x_max + noise[2] * sx))
                ys = sorted((b.y_min + noise[1] * sy, b.y_max + noise[3] * sy))
                b = BoundingBox(xs[0], ys[0], xs[1], ys[1])
            b = b.intersection(crop)
            if b is None or b.area <= 0:
                continue
            out.append({
                "label": obj.label,
                "score": score,
                "box": [
                    (b.y_min - oy) / crop_h,
                    (b.x_min - ox) / crop_w,
                    (b.y_max - oy) / crop_h,
                    (b.x_max - ox) / crop_w,
                ],
            })
        return out

    def respond(
        self, frame_id: str, offset: tuple[int, int], crop_w: int, crop_h: int, request_id: str
    ) -> bytes:
        body = {"detections": self.detections(frame_id, offset, crop_w, crop_h, request_id), "model": MODEL_NAME}
        return json.dumps(body, separators=(",", ":")).encode()


class LocalTeacherAnnotator(Annotator):
    """In-process annotator backed by a :class:`Teacher`; no network, same
    response bytes as the HTTP service."""

    def __init__(self, teacher: Teacher, min_confidence: float, target_classes):
        self.teacher = teacher
        self.min_confidence = min_confidence
        self.target_classes = tuple(target_classes)

    def annotate(self, req: AnnotationRequest) -> AnnotatedItem:
        t0 = time.perf_counter()
        body = self.teacher.respond(req.frame_id, req.offset, req.crop_width, req.crop_height, req.request_id)
        raw = parse_response(body)
        latency = (time.perf_counter() - t0) * 1000.0
        return to_annotated_item(req, raw, self.min_confidence, self.target_classes, latency)


# -- HTTP service ------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    server: "TeacherServer"
    protocol_version = "HTTP/1.1"
    # headers and body go out as separate writes; without this a kept-alive
    # connection stalls on delayed ACKs
    disable_nagle_algorithm = True

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s " + fmt, self.address_string(), *args)

    def _reply(self, status: int, payload: bytes, ctype: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _bad(self, msg: str) -> None:
        self._reply(400, json.dumps({"error": msg}).encode())

    def do_GET(self) -> None:
        if self.path == "/stats":
            self._reply(200, json.dumps(self.server.stats()).encode())
        else:
            self._reply(404, b'{"error":"not found"}')

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length > 0 else b""
        if self.path != "/annotate":
            self._reply(404, b'{"error":"not found"}')
            return
        srv = self.server
        srv.enter()
        try:
            if srv.delay_ms:
                time.sleep(srv.delay_ms / 1000.0)
            self._annotate(body)
        finally:
            srv.leave()

    def _annotate(self, body: bytes) -> None:
        if self.headers.get("Content-Type", "").split(";")[0].strip() != "image/png":
            return self._bad("Content-Type must be image/png")
        request_id = self.headers.get("X-Request-Id")
        frame_id = self.headers.get("X-Frame-Id")
        if not request_id or not frame_id:
            return self._bad("X-Request-Id and X-Frame-Id headers are required")
        try:
            ox, oy = (int(v) for v in self.headers.get("X-Crop-Offset", "0,0").split(","))
        except ValueError:
            return self._bad("X-Crop-Offset must be '<x>,<y>'")
        try:
            with Image.open(io.BytesIO(body)) as im:
                if im.format != "PNG":
                    raise ValueError("not a PNG")
                crop_w, crop_h = im.size
        except Exception as exc:
            return self._bad(f"body is not a PNG image: {exc}")
        size = self.server.teacher.store.sizes.get(frame_id)
        if ox < 0 or oy < 0 or (size and (ox + crop_w > size[0] or oy + crop_h > size[1])):
            return self._bad(f"crop {crop_w}x{crop_h} at ({ox},{oy}) is outside frame {frame_id!r}")
        self._reply(200, self.server.teacher.respond(frame_id, (ox, oy), crop_w, crop_h, request_id))


class TeacherServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, teacher: Teacher, address: tuple[str, int] = ("127.0.0.1", 0), delay_ms: int = 0):
        super().__init__(address, _Handler)
        self.teacher = teacher
        self.delay_ms = delay_ms
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0
        self.requests = 0
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def enter(self) -> None:
        with self._lock:
            self.in_flight += 1
            self.requests += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def leave(self) -> None:
        with self._lock:
            self.in_flight -= 1

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"in_flight": self.in_flight, "max_in_flight": self.max_in_flight, "requests": self.requests}

    def start(self) -> "TeacherServer":
        self._thread = threading.Thread(target=self.serve_forever, name="teacher", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "TeacherServer":
        return self if self._thread else self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(
    store: GroundTruthStore,
    profile: DegradationProfile = PERFECT,
    host: str = "127.0.0.1",
    port: int = 0,
    delay_ms: int = 0,
) -> TeacherServer:
    """Start the service on a background thread and return it."""
    return TeacherServer(Teacher(store, profile), (host, port), delay_ms).start()
