"""Runs a configured pipeline: capture/filter workers (one per stream), an
annotation worker pool, and the dataset stage on the calling thread.

Stages talk through bounded queues. The dataset stage owns the stop
condition; when it fires, a cancellation event stops capture, queued work
is dropped, requests already in flight finish, and the dataset is
finalized and handed to the trainer.
"""

from __future__ import annotations

import heapq
import logging
import queue
import shutil
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from ..annotate import AnnotatedItem, AnnotationRequest, Annotator
from ..capture import FrameSource
from ..clock import Clock, clock_from_env
from ..dataset import (
    ANNOTATIONS_FILE, EXAMPLES_FILE, IMAGES_DIR, MANIFEST_FILE, DatasetManifest, DatasetWriter, Origin, Outcome,
    class_balance_report,
)
from ..errors import AnnotationError, AnnotationUnavailable, DatasetError, TrainerFailed
from ..evaluate import DriftMonitor, DriftSignal
from ..filters import FilterItem
from .config import PipelineConfig
from .registry import REGISTRY

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_EMPTY_DATASET = 1
EXIT_CONFIG = 2
EXIT_ANNOTATION_UNAVAILABLE = 3
EXIT_TRAINER_FAILED = 4

_DONE = object()
_POLL_S = 0.05


class _Queue(queue.Queue):
    """Bounded FIFO that remembers its largest size."""

    def __init__(self, maxsize: int):
        super().__init__(maxsize)
        self.high_water = 0

    def _put(self, item) -> None:
        super()._put(item)
        self.high_water = max(self.high_water, len(self.queue))


@dataclass
class RunMetrics:
    frames_captured: int = 0
    frames_passed: int = 0
    items_filtered: int = 0
    capture_errors: int = 0
    annotation_requests: int = 0
    annotation_errors: int = 0
    annotated: int = 0
    dropped_after_stop: int = 0
    examples_accepted: int = 0
    rejected_no_targets: int = 0
    bytes_uploaded: int = 0
    stage_seconds: dict[str, float] = field(
        default_factory=lambda: {"capture": 0.0, "filter": 0.0, "annotate": 0.0, "dataset": 0.0}
    )
    queue_high_water: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def add(self, **counts: int) -> None:
        with self._lock:
            for k, v in counts.items():
                setattr(self, k, getattr(self, k) + v)

    def add_time(self, stage: str, seconds: float) -> None:
        with self._lock:
            self.stage_seconds[stage] += seconds

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stage_seconds"] = {k: round(v, 4) for k, v in self.stage_seconds.items()}
        return d


@dataclass
class CollectionReport:
    dataset_dir: str
    stop_reason: str | None
    examples: int
    class_counts: dict[str, int]
    balance_warnings: list[str]
    trainer: dict[str, Any] | None = None
    error: str | None = None
    exit_code: int = EXIT_OK


@dataclass
class RunReport:
    exit_code: int
    collections: list[CollectionReport]
    metrics: RunMetrics
    drift_signals: list[DriftSignal] = field(default_factory=list)
    error: str | None = None

    @property
    def manifest_path(self) -> str | None:
        return str(Path(self.collections[0].dataset_dir) / MANIFEST_FILE) if self.collections else None

    @property
    def stop_reason(self) -> str | None:
        return self.collections[-1].stop_reason if self.collections else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "exit_code": self.exit_code,
            "stop_reason": self.stop_reason,
            "manifest": self.manifest_path,
            "error": self.error,
            "collections": [asdict(c) for c in self.collections],
            "drift_signals": [asdict(s) for s in self.drift_signals],
            "metrics": self.metrics.to_dict(),
        }


@dataclass(order=True)
class _Result:
    seq: int
    stream_id: str = field(compare=False)
    item: FilterItem = field(compare=False)
    annotated: AnnotatedItem | None = field(compare=False, default=None)


def _prepare_output(path: Path) -> None:
    """Clear a previous dataset at ``path``; refuse to touch anything else."""
    if path.exists() and any(path.iterdir()):
        if not (path / MANIFEST_FILE).exists() and not (path / EXAMPLES_FILE).exists():
            raise DatasetError(f"output directory {path} is not empty and does not hold a dataset")
        shutil.rmtree(path / IMAGES_DIR, ignore_errors=True)
        for name in (MANIFEST_FILE, EXAMPLES_FILE, ANNOTATIONS_FILE, "label_map.json", "trainer.log"):
            (path / name).unlink(missing_ok=True)
    path.mkdir(parents=True, exist_ok=True)


class PipelineRun:
    def __init__(self, cfg: PipelineConfig, clock: Clock | None = None):
        self.cfg = cfg
        self.clock = clock or clock_from_env()
        self.sources: list[FrameSource] = REGISTRY.build(cfg, "capture")
        self.filter = REGISTRY.build(cfg, "filter")
        self.annotator: Annotator = REGISTRY.build(cfg, "annotate")
        self.dataset = REGISTRY.build(cfg, "dataset")
        self.trainer = REGISTRY.build(cfg, "train")
        self.workers = max(1, int(getattr(self.annotator, "workers", 1)))
        self.metrics = RunMetrics()
        self.cancel = threading.Event()
        self._fatal: BaseException | None = None
        self._fatal_lock = threading.Lock()
        cap = cfg.queue_capacity
        self.work_q = _Queue(cap)
        self.result_q = _Queue(cap)
        self.drift = (DriftMonitor(cfg.drift.window, cfg.drift.threshold, cfg.drift.k)
                      if cfg.drift is not None else None)

    def request_stop(self) -> None:
        """Ask a running pipeline to stop; the partial dataset is finalized."""
        self.cancel.set()

    def _set_fatal(self, exc: BaseException) -> None:
        with self._fatal_lock:
            if self._fatal is None:
                self._fatal = exc
        self.cancel.set()

    def _put(self, q: _Queue, item) -> bool:
        while not self.cancel.is_set():
            try:
                q.put(item, timeout=_POLL_S)
                return True
            except queue.Full:
                continue
        return False

    # -- workers --------------------------------------------------------------

    def _capture(self, source: FrameSource) -> None:
        run_filter = self.filter.for_stream()
        seq = 0
        it = iter(source)
        try:
            while not self.cancel.is_set():
                t0 = time.perf_counter()
                frame = next(it, None)
                t1 = time.perf_counter()
                if frame is None:
                    break
                items = run_filter(frame)
                t2 = time.perf_counter()
                self.metrics.add_time("capture", t1 - t0)
                self.metrics.add_time("filter", t2 - t1)
                self.metrics.add(frames_captured=1, frames_passed=int(bool(items)), items_filtered=len(items))
                for item in items:
                    if not self._put(self.work_q, (seq, source.stream_id, item)):
                        return
                    seq += 1
        except Exception as exc:
            log.exception("capture worker for %s failed", source.stream_id)
            self._set_fatal(exc)
        finally:
            self.metrics.add(capture_errors=len(source.errors))

    def _annotate(self) -> None:
        while True:
            msg = self.work_q.get()
            if msg is _DONE:
                self.result_q.put(_DONE)
                return
            seq, stream_id, item = msg
            if self.cancel.is_set():
                self.metrics.add(dropped_after_stop=1)
                continue
            req = AnnotationRequest.for_region(item.frame, item.region,
                                               f"{stream_id}/{item.frame.index}/{item.crop_index}")
            self.metrics.add(annotation_requests=1)
            t0 = time.perf_counter()
            result = None
            try:
                result = self.annotator.annotate(req)
                self.metrics.add(annotated=1, bytes_uploaded=len(req.png))
            except AnnotationUnavailable as exc:
                log.error("%s", exc)
                self._set_fatal(exc)
            except AnnotationError as exc:
                log.warning("annotation of %s failed: %s", req.request_id, exc)
                self.metrics.add(annotation_errors=1)
            except Exception as exc:  # a bad item must not take the pool down
                log.exception("annotation of %s raised", req.request_id)
                self.metrics.add(annotation_errors=1)
            self.metrics.add_time("annotate", time.perf_counter() - t0)
            # failed items still pass through so the reorder buffer advances
            self.result_q.put(_Result(seq, stream_id, item, result))

    def _close_capture(self, threads: list[threading.Thread]) -> None:
        for t in threads:
            t.join()
        for _ in range(self.workers):
            self.work_q.put(_DONE)

    # -- dataset stage ----------------------------------------------------------

    def _new_writer(self, out_dir: Path) -> DatasetWriter:
        _prepare_output(out_dir)
        deadline = self.cfg.deadline_after(self.clock.now())
        return DatasetWriter(out_dir, self.cfg.label_map, self.cfg.target_classes, self.cfg.target_image_count,
                             deadline, self.clock, self.cfg.eval_fraction, self.cfg.fingerprint)

    def _close_collection(self, writer: DatasetWriter, reason: str, train: bool = True) -> CollectionReport:
        m: DatasetManifest = writer.manifest
        report = CollectionReport(str(writer.out_dir), None, 0, {}, [])
        try:
            writer.finalize(reason)
        except DatasetError as exc:
            report.error = str(exc)
            report.exit_code = EXIT_EMPTY_DATASET
            train = False
        report.stop_reason = m.stop_reason
        report.examples = m.examples
        report.class_counts = {c: m.class_counts.get(c, 0) for c in m.target_classes}
        balance = class_balance_report(m.class_counts, m.target_classes, self.dataset.min_instances)
        report.balance_warnings = balance.warnings
        for w in balance.warnings:
            log.warning("%s", w)
        if train:
            try:
                tr = self.trainer.run(writer.out_dir)
                report.trainer = tr.to_dict() if tr is not None else None
            except TrainerFailed as exc:
                log.error("%s", exc)
                report.trainer = exc.report.to_dict()
                report.error = str(exc)
                report.exit_code = EXIT_TRAINER_FAILED
        return report

    def _consume(self, writer: DatasetWriter, collections: list[CollectionReport]) -> tuple[DatasetWriter, str | None]:
        done = 0
        heaps: dict[str, list[_Result]] = {}
        next_seq: dict[str, int] = {}
        stop_reason: str | None = None
        drift_cfg = self.cfg.drift

        def stop(reason: str) -> None:
            nonlocal stop_reason
            if stop_reason is None:
                stop_reason = reason
                self.cancel.set()

        while done < self.workers:
            if stop_reason is None:
                if self.cancel.is_set():
                    stop("interrupted")
                elif writer.check_deadline() is not None:
                    stop(writer.manifest.stop_reason)
            try:
                r = self.result_q.get(timeout=_POLL_S)
            except queue.Empty:
                continue
            if r is _DONE:
                done += 1
                continue
            if stop_reason is not None:
                self.metrics.add(dropped_after_stop=1)
                continue
            heap = heaps.setdefault(r.stream_id, [])
            heapq.heappush(heap, r)
            while heap and heap[0].seq == next_seq.get(r.stream_id, 0) and stop_reason is None:
                cur = heapq.heappop(heap)
                next_seq[r.stream_id] = cur.seq + 1
                if cur.annotated is None:
                    continue
                t0 = time.perf_counter()
                frame = cur.item.frame
                origin = Origin(cur.stream_id, frame.index, frame.frame_id, cur.item.offset)
                outcome = writer.accumulate(cur.annotated, cur.item.crop, origin)
                self.metrics.add_time("dataset", time.perf_counter() - t0)
                if outcome is Outcome.REJECTED_NO_TARGETS:
                    self.metrics.add(rejected_no_targets=1)
                elif outcome in (Outcome.ACCEPTED, Outcome.STOP_COUNT):
                    self.metrics.add(examples_accepted=1)
                    if self.drift is not None:
                        for d in writer.examples[-1].annotations:
                            sig = self.drift.observe(d.label)
                            if sig is None:
                                continue
                            log.warning("class mix drifted: window %d, divergence %.3f",
                                        sig.window_index, sig.divergence)
                            if (drift_cfg.rearm and outcome is Outcome.ACCEPTED
                                    and len(collections) + 1 < drift_cfg.max_runs):
                                collections.append(self._close_collection(writer, "drift"))
                                n = len(collections)
                                base = self.dataset.output_dir
                                writer = self._new_writer(base.with_name(f"{base.name}-rearm-{n:02d}"))
                                break
                if outcome.is_stop:
                    stop(writer.manifest.stop_reason)
        if stop_reason is None:
            # a stop request can land while the last done markers drain
            stop_reason = "interrupted" if self.cancel.is_set() else "exhausted"
        return writer, stop_reason

    # -- top level ------------------------------------------------------------

    def run(self) -> RunReport:
        collections: list[CollectionReport] = []
        writer = self._new_writer(self.dataset.output_dir)
        capture = [threading.Thread(target=self._capture, args=(s,), name=f"capture-{s.stream_id}", daemon=True)
                   for s in self.sources]
        pool = [threading.Thread(target=self._annotate, name=f"annotate-{i}", daemon=True)
                for i in range(self.workers)]
        closer = threading.Thread(target=self._close_capture, args=(capture,), name="capture-closer", daemon=True)
        for t in capture + pool + [closer]:
            t.start()
        try:
            writer, reason = self._consume(writer, collections)
        finally:
            self.cancel.set()
            for t in pool + [closer]:
                t.join()
            self.annotator.close()
        self.metrics.queue_high_water = {"filter_to_annotate": self.work_q.high_water,
                                         "annotate_to_dataset": self.result_q.high_water}

        fatal = self._fatal
        if isinstance(fatal, AnnotationUnavailable):
            last = self._close_collection(writer, "aborted", train=False)
            collections.append(last)
            code, err = EXIT_ANNOTATION_UNAVAILABLE, str(fatal)
        elif fatal is not None:
            last = self._close_collection(writer, "aborted", train=False)
            collections.append(last)
            code, err = 1, f"{type(fatal).__name__}: {fatal}"
        else:
            collections.append(self._close_collection(writer, reason))
            codes = [c.exit_code for c in collections if c.exit_code]
            code = codes[0] if codes else EXIT_OK
            err = next((c.error for c in collections if c.error), None)
        signals = list(self.drift.signals) if self.drift is not None else []
        return RunReport(code, collections, self.metrics, signals, err)


def run(cfg: PipelineConfig, clock: Clock | None = None) -> RunReport:
    return PipelineRun(cfg, clock).run()
