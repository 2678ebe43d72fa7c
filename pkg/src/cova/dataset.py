"""Training-set assembly: accepting annotated crops, stop conditions,
COCO export, by-video splitting, merging and the external trainer call.

A dataset directory looks like::

    images/<stream>_<frame>_<crop>.png
    examples.jsonl      one record per accepted example, appended after
                        its image is on disk
    manifest.json       run summary, rewritten on every stop
    annotations.json    COCO export, written on finalize

``annotations.json`` follows COCO with two extensions: ``score`` on each
annotation and ``origin`` (stream, frame, crop offset) on each image.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .annotate import AnnotatedItem
from .capture import encode_png
from .clock import Clock, SystemClock, format_instant
from .errors import DatasetError, TrainerFailed
from .geometry import BoundingBox, Detection, LabelMap

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
EXAMPLES_FILE = "examples.jsonl"
MANIFEST_FILE = "manifest.json"
ANNOTATIONS_FILE = "annotations.json"
IMAGES_DIR = "images"
DEFAULT_MIN_INSTANCES = 10


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass(frozen=True)
class Origin:
    stream_id: str
    frame_index: int
    frame_id: str
    offset: tuple[int, int] = (0, 0)

    def to_dict(self) -> dict[str, Any]:
        return {"stream_id": self.stream_id, "frame_index": self.frame_index,
                "frame_id": self.frame_id, "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Origin":
        return cls(d["stream_id"], int(d["frame_index"]), d["frame_id"], tuple(d["offset"]))

    def digest(self) -> str:
        return fingerprint(self.to_dict())[:8]


@dataclass
class TrainingExample:
    """A stored image and its annotations in that image's coordinates."""

    file_name: str
    width: int
    height: int
    annotations: list[Detection]
    origin: Origin
    image_path: Path | None = None

    @property
    def segment(self) -> str:
        return self.origin.stream_id

    def to_record(self) -> dict[str, Any]:
        return {
            "file_name": self.file_name,
            "width": self.width,
            "height": self.height,
            "origin": self.origin.to_dict(),
            "annotations": [
                {"label": d.label, "score": d.score, "box": list(d.box.as_tuple())} for d in self.annotations
            ],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any], images_dir: Path | None = None) -> "TrainingExample":
        dets = [Detection(BoundingBox(*a["box"]), a["label"], a["score"]) for a in rec["annotations"]]
        path = images_dir / rec["file_name"] if images_dir is not None else None
        return cls(rec["file_name"], rec["width"], rec["height"], dets, Origin.from_dict(rec["origin"]), path)


class Outcome(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_NO_TARGETS = "rejected_no_targets"
    STOP_COUNT = "stop_count"
    STOP_DEADLINE = "stop_deadline"

    @property
    def is_stop(self) -> bool:
        return self in (Outcome.STOP_COUNT, Outcome.STOP_DEADLINE)


STOP_REASONS = {Outcome.STOP_COUNT: "count", Outcome.STOP_DEADLINE: "deadline"}


@dataclass
class DatasetManifest:
    created_at: float
    target_image_count: int
    deadline: float | None
    label_map: LabelMap
    target_classes: tuple[str, ...]
    eval_fraction: float = 0.0
    config_fingerprint: str = ""
    examples: int = 0
    rejected_no_targets: int = 0
    class_counts: dict[str, int] = field(default_factory=dict)
    stop_reason: str | None = None
    split: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "created_at": format_instant(self.created_at),
            "target_image_count": self.target_image_count,
            "deadline": None if self.deadline is None else format_instant(self.deadline),
            "count_unit": "accepted examples (one per stored crop or frame)",
            "label_map": [{"id": i, "name": n} for i, n in self.label_map.pairs()],
            "target_classes": list(self.target_classes),
            "examples": self.examples,
            "rejected_no_targets": self.rejected_no_targets,
            "class_counts": {c: self.class_counts.get(c, 0) for c in self.target_classes},
            "eval_fraction": self.eval_fraction,
            "split": self.split,
            "stop_reason": self.stop_reason,
            "config_fingerprint": self.config_fingerprint,
        }

    def write(self, out_dir: Path) -> None:
        tmp = out_dir / (MANIFEST_FILE + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        os.replace(tmp, out_dir / MANIFEST_FILE)


class DatasetWriter:
    """Single consumer of annotated items. Owns the stop condition."""

    def __init__(
        self,
        out_dir: str | Path,
        label_map: LabelMap,
        target_classes: Iterable[str],
        target_image_count: int,
        deadline_s: float | None = None,
        clock: Clock | None = None,
        eval_fraction: float = 0.0,
        config_fingerprint: str = "",
    ):
        if target_image_count < 1:
            raise ValueError("target_image_count must be >= 1")
        self.targets = tuple(target_classes)
        unknown = [c for c in self.targets if c not in label_map]
        if unknown:
            raise ValueError(f"target classes not in label map: {unknown}")
        self.out_dir = Path(out_dir)
        self.images_dir = self.out_dir / IMAGES_DIR
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock or SystemClock()
        start = self.clock.now()
        self.manifest = DatasetManifest(
            created_at=start,
            target_image_count=target_image_count,
            deadline=None if deadline_s is None else start + deadline_s,
            label_map=label_map,
            target_classes=self.targets,
            eval_fraction=eval_fraction,
            config_fingerprint=config_fingerprint,
        )
        self.examples: list[TrainingExample] = []
        self._records = open(self.out_dir / EXAMPLES_FILE, "w")

    @property
    def stopped(self) -> bool:
        return self.manifest.stop_reason is not None

    def _stop(self, outcome: Outcome) -> Outcome:
        if self.manifest.stop_reason is None:
            self.manifest.stop_reason = STOP_REASONS[outcome]
            self.manifest.write(self.out_dir)
        return outcome

    def _current_stop(self) -> Outcome:
        return Outcome.STOP_COUNT if self.manifest.stop_reason == "count" else Outcome.STOP_DEADLINE

    def check_deadline(self) -> Outcome | None:
        if self.stopped:
            return self._current_stop()
        dl = self.manifest.deadline
        if dl is not None and self.clock.now() >= dl:
            return self._stop(Outcome.STOP_DEADLINE)
        return None

    def accumulate(self, item: AnnotatedItem, pixels: np.ndarray, origin: Origin) -> Outcome:
        """Store ``item`` if it has a target detection. ``pixels`` is the
        image the teacher saw; detections are in frame coordinates."""
        stop = self.check_deadline()
        if stop is not None:
            return stop
        dets = [d for d in item.detections if d.label in self.targets]
        if not dets:
            self.manifest.rejected_no_targets += 1
            return Outcome.REJECTED_NO_TARGETS
        ox, oy = origin.offset
        h, w = pixels.shape[:2]
        local = [Detection(d.box.translate(-ox, -oy), d.label, d.score) for d in dets]
        name = f"{origin.stream_id}_{origin.frame_index:06d}_{item_crop_tag(item)}.png"
        path = self.images_dir / name
        try:
            path.write_bytes(encode_png(pixels))
        except OSError as exc:
            raise DatasetError(f"cannot write {path}: {exc}") from exc
        ex = TrainingExample(name, w, h, local, origin, path)
        self._records.write(json.dumps(ex.to_record()) + "\n")
        self._records.flush()
        self.examples.append(ex)
        m = self.manifest
        m.examples += 1
        for d in local:
            m.class_counts[d.label] = m.class_counts.get(d.label, 0) + 1
        if m.examples >= m.target_image_count:
            return self._stop(Outcome.STOP_COUNT)
        return Outcome.ACCEPTED

    def finalize(self, stop_reason: str | None = None) -> DatasetManifest:
        """Close the record log, export COCO if anything was collected and
        write the manifest. Raises DatasetError on an empty dataset after
        the manifest is on disk."""
        if not self._records.closed:
            self._records.close()
        m = self.manifest
        if m.stop_reason is None:
            m.stop_reason = stop_reason or "interrupted"
        if m.eval_fraction > 0 and self.examples:
            try:
                train, ev = split(self.examples, m.eval_fraction)
                m.split = {"train": [e.file_name for e in train], "eval": [e.file_name for e in ev]}
            except DatasetError as exc:
                log.warning("split skipped: %s", exc)
        m.write(self.out_dir)
        write_label_map(self.out_dir / "label_map.json", m.label_map)
        if not self.examples:
            raise DatasetError("dataset is empty: no example with a target-class detection was collected")
        export_coco(self.examples, m.label_map, self.out_dir)
        return m


def item_crop_tag(item: AnnotatedItem) -> str:
    x, y = item.offset
    w, h = item.crop_size
    return f"{x}x{y}+{w}x{h}"


# -- COCO ------------------------------------------------------------------

def coco_document(examples: Sequence[TrainingExample], label_map: LabelMap) -> dict[str, Any]:
    images, annotations = [], []
    for img_id, ex in enumerate(examples, start=1):
        images.append({
            "id": img_id, "file_name": ex.file_name, "width": ex.width, "height": ex.height,
            "origin": ex.origin.to_dict(),
        })
        for d in ex.annotations:
            x, y, w, h = d.box.to_xywh()
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": img_id,
                "category_id": label_map.id_of(d.label),
                "bbox": [x, y, w, h],
                "area": w * h,
                "iscrowd": 0,
                "score": d.score,
            })
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in label_map.pairs()],
    }


def export_coco(examples: Sequence[TrainingExample], label_map: LabelMap, out_dir: str | Path) -> Path:
    """Write ``images/`` and ``annotations.json``. Ids follow insertion order."""
    if not examples:
        raise DatasetError("cannot export an empty example set")
    out_dir = Path(out_dir)
    images_dir = out_dir / IMAGES_DIR
    images_dir.mkdir(parents=True, exist_ok=True)
    for ex in examples:
        dst = images_dir / ex.file_name
        if ex.image_path is not None and Path(ex.image_path).resolve() != dst.resolve():
            shutil.copyfile(ex.image_path, dst)
    path = out_dir / ANNOTATIONS_FILE
    path.write_text(json.dumps(coco_document(examples, label_map), indent=1) + "\n")
    return path


def write_label_map(path: Path, label_map: LabelMap) -> None:
    path.write_text(json.dumps([{"id": i, "name": n} for i, n in label_map.pairs()]) + "\n")


def read_label_map(dataset_dir: str | Path) -> LabelMap:
    d = Path(dataset_dir)
    if (d / MANIFEST_FILE).exists():
        doc = json.loads((d / MANIFEST_FILE).read_text())
        return LabelMap.from_pairs((c["id"], c["name"]) for c in doc["label_map"])
    doc = json.loads((d / ANNOTATIONS_FILE).read_text())
    return LabelMap.from_pairs((c["id"], c["name"]) for c in doc["categories"])


def load_examples(dataset_dir: str | Path) -> list[TrainingExample]:
    """Examples of a dataset directory, from the record log if present
    (so partial datasets load), else from annotations.json."""
    d = Path(dataset_dir)
    images_dir = d / IMAGES_DIR
    log_path = d / EXAMPLES_FILE
    if log_path.exists():
        out = []
        for line in log_path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                out.append(TrainingExample.from_record(json.loads(line), images_dir))
            except (ValueError, KeyError):
                log.warning("%s: ignoring a truncated trailing record", log_path)
        return out
    doc = json.loads((d / ANNOTATIONS_FILE).read_text())
    cats = {c["id"]: c["name"] for c in doc["categories"]}
    by_image: dict[int, list[Detection]] = {im["id"]: [] for im in doc["images"]}
    for a in doc["annotations"]:
        box = BoundingBox.from_xywh(*a["bbox"])
        by_image[a["image_id"]].append(Detection(box, cats[a["category_id"]], a.get("score", 1.0)))
    out = []
    for im in doc["images"]:
        origin = Origin.from_dict(im["origin"]) if "origin" in im else Origin("", 0, im["file_name"])
        out.append(TrainingExample(im["file_name"], im["width"], im["height"], by_image[im["id"]], origin,
                                   images_dir / im["file_name"]))
    return out


# -- split / merge / balance ---------------------------------------------------

def split(examples: Sequence[TrainingExample], eval_fraction: float) -> tuple[list[TrainingExample], list[TrainingExample]]:
    """Assign whole origin segments (streams) to train or eval.

    Segments are taken largest first; each goes to eval when that brings
    the eval count closer to the requested fraction.
    """
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in [0,1), got {eval_fraction}")
    if eval_fraction == 0:
        return list(examples), []
    sizes: dict[str, int] = {}
    for ex in examples:
        sizes[ex.segment] = sizes.get(ex.segment, 0) + 1
    if len(sizes) < 2:
        raise DatasetError(f"cannot split by video: only {len(sizes)} origin segment(s)")
    target = eval_fraction * len(examples)
    eval_segments: set[str] = set()
    n_eval = 0
    for seg, size in sorted(sizes.items(), key=lambda kv: (-kv[1], kv[0])):
        if abs(n_eval + size - target) < abs(n_eval - target) and len(eval_segments) < len(sizes) - 1:
            eval_segments.add(seg)
            n_eval += size
    if not eval_segments:
        # the smallest segment, so train keeps the bulk
        eval_segments.add(min(sizes.items(), key=lambda kv: (kv[1], kv[0]))[0])
    train = [e for e in examples if e.segment not in eval_segments]
    ev = [e for e in examples if e.segment in eval_segments]
    return train, ev


def merge(
    base_dir: str | Path,
    new_examples: Sequence[TrainingExample],
    out_dir: str | Path,
    label_map: LabelMap | None = None,
) -> list[TrainingExample]:
    """Union of a finalized dataset and new examples, exported to ``out_dir``.
    A clashing file name gets its origin digest appended."""
    base_map = read_label_map(base_dir)
    if label_map is not None and label_map != base_map:
        raise DatasetError(f"label maps differ: {base_map!r} vs {label_map!r}")
    merged: list[TrainingExample] = []
    names: set[str] = set()
    for ex in list(load_examples(base_dir)) + list(new_examples):
        name = ex.file_name
        if name in names:
            stem, dot, suffix = name.rpartition(".")
            name = f"{stem}-{ex.origin.digest()}.{suffix}" if dot else f"{name}-{ex.origin.digest()}"
            if name in names:
                raise DatasetError(f"duplicate example {ex.file_name!r} with identical origin")
        names.add(name)
        merged.append(TrainingExample(name, ex.width, ex.height, list(ex.annotations), ex.origin, ex.image_path))
    out = Path(out_dir)
    (out / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    with open(out / EXAMPLES_FILE, "w") as fh:
        for ex in merged:
            fh.write(json.dumps(ex.to_record()) + "\n")
    write_label_map(out / "label_map.json", base_map)
    if merged:
        export_coco(merged, base_map, out)
        for ex in merged:
            ex.image_path = out / IMAGES_DIR / ex.file_name
    return merged


@dataclass
class BalanceReport:
    counts: dict[str, int]
    warnings: list[str]


def class_balance_report(
    class_counts: dict[str, int], target_classes: Iterable[str], minimum: int = DEFAULT_MIN_INSTANCES
) -> BalanceReport:
    counts = {c: int(class_counts.get(c, 0)) for c in target_classes}
    warnings = [
        f"class {c!r} has {n} instance(s), below the minimum of {minimum}"
        for c, n in counts.items() if n < minimum
    ]
    return BalanceReport(counts, warnings)


# -- external trainer ----------------------------------------------------------

TRAINABLE_LAYERS = ("Unfrozen", "BoxRegression", "Top")


@dataclass(frozen=True)
class TrainerSpec:
    """``command`` is split shell-style, then each argument has
    ``{dataset_dir}``, ``{label_map}``, ``{output_dir}``,
    ``{trainable_layers}`` and ``{epochs}`` substituted."""

    command: str
    trainable_layers: str = "BoxRegression"
    epochs: int | None = None

    def __post_init__(self) -> None:
        if "{dataset_dir}" not in self.command:
            raise ValueError("trainer command must reference {dataset_dir}")
        if self.trainable_layers not in TRAINABLE_LAYERS:
            raise ValueError(f"trainable_layers must be one of {TRAINABLE_LAYERS}")

    def argv(self, dataset_dir: str | Path, label_map: str | Path, output_dir: str | Path) -> list[str]:
        values = {
            "dataset_dir": str(dataset_dir),
            "label_map": str(label_map),
            "output_dir": str(output_dir),
            "trainable_layers": self.trainable_layers,
            "epochs": "" if self.epochs is None else str(self.epochs),
        }
        out = []
        for tok in shlex.split(self.command):
            for k, v in values.items():
                tok = tok.replace("{" + k + "}", v)
            out.append(tok)
        return out


@dataclass
class TrainerReport:
    argv: list[str]
    returncode: int
    output: str
    duration_s: float

    @property
    def ok(self) -> bool:
        return self.returncode == 0

    def to_dict(self) -> dict[str, Any]:
        return {"argv": self.argv, "returncode": self.returncode, "duration_s": round(self.duration_s, 3),
                "output_tail": self.output[-2000:]}


def invoke_trainer(
    spec: TrainerSpec,
    dataset_dir: str | Path,
    label_map: str | Path | None = None,
    output_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    timeout_s: float | None = None,
) -> TrainerReport:
    dataset_dir = Path(dataset_dir)
    label_map = label_map or dataset_dir / "label_map.json"
    output_dir = output_dir or dataset_dir / "model"
    argv = spec.argv(dataset_dir, label_map, output_dir)
    t0 = time.monotonic()
    try:
        proc = subprocess.run(argv, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
                              timeout=timeout_s, check=False)
        report = TrainerReport(argv, proc.returncode, proc.stdout, time.monotonic() - t0)
    except FileNotFoundError as exc:
        report = TrainerReport(argv, 127, f"command not found: {exc}", time.monotonic() - t0)
    except subprocess.TimeoutExpired as exc:
        out = exc.output or ""
        report = TrainerReport(argv, -1, (out if isinstance(out, str) else out.decode()) + "\ntimed out",
                               time.monotonic() - t0)
    if log_path is not None:
        Path(log_path).write_text(report.output)
    if not report.ok:
        raise TrainerFailed(report)
    return report
