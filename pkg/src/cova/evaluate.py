"""COCO-style detection evaluation and a class-mix drift monitor.

Matching is greedy in score order; AP is the 101-point interpolated
average; mAP averages class APs over IoU 0.50:0.05:0.95. One area range
("all") and at most 100 detections per image and class.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import GroundTruthError
from .geometry import BoundingBox, Detection, GroundTruthObject, LabelMap, iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class MatchResult:
    tp: list[bool]  # per detection, in the given order
    matched_gt: list[int]  # GT index per detection, -1 if unmatched
    fn: int

    @property
    def tp_count(self) -> int:
        return sum(self.tp)


def match(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], iou_threshold: float) -> MatchResult:
    """Greedy one-to-one matching. ``dets`` must already be in descending
    score order; each takes the unmatched same-class GT of highest IoU
    (lowest index on ties) if that IoU reaches the threshold."""
    taken = [False] * len(gts)
    tp, matched = [], []
    for d in dets:
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or g.label != d.label:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        tp.append(best >= 0)
        matched.append(best)
    return MatchResult(tp, matched, taken.count(False))


def sort_by_score(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def precision_recall(scores: Sequence[float], tp: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(~hits)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall


def interpolated_precision(precision: np.ndarray, recall: np.ndarray) -> np.ndarray:
    """Max precision at recall >= r, at each of the 101 recall points."""
    out = np.zeros(len(RECALL_POINTS))
    if len(precision) == 0:
        return out
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    ok = idx < len(env)
    out[ok] = env[idx[ok]]
    return out


def average_precision(scores: Sequence[float], tp: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP over detections pooled across images.
    Ties in score keep their given order."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    p, r = precision_recall(scores, tp, n_gt)
    return float(interpolated_precision(p, r).mean())


@dataclass
class ClassResult:
    name: str
    gt_count: int
    det_count: int
    ap_per_threshold: list[float]
    precision_at_50: list[float] = field(repr=False, default_factory=list)

    @property
    def ap(self) -> float:
        return float(np.mean(self.ap_per_threshold))


@dataclass
class EvaluationReport:
    classes: dict[str, ClassResult]
    images: int
    skipped_classes: list[str] = field(default_factory=list)  # no GT instances

    @property
    def mean_ap(self) -> float:
        return float(np.mean([c.ap for c in self.classes.values()]))

    def ap_at(self, threshold: float) -> float:
        i = IOU_THRESHOLDS.index(round(threshold, 2))
        return float(np.mean([c.ap_per_threshold[i] for c in self.classes.values()]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "mAP": self.mean_ap,
            "mAP50": self.ap_at(0.5),
            "mAP75": self.ap_at(0.75),
            "iou_thresholds": list(IOU_THRESHOLDS),
            "images": self.images,
            "classes": {
                name: {
                    "ap": c.ap,
                    "ap_per_threshold": c.ap_per_threshold,
                    "gt": c.gt_count,
                    "detections": c.det_count,
                    "precision_at_recall_iou50": c.precision_at_50,
                }
                for name, c in self.classes.items()
            },
            "skipped_classes": self.skipped_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        lines = [f"{'class':<16}{'gt':>7}{'dets':>7}{'AP':>8}{'AP50':>8}{'AP75':>8}"]
        for name, c in self.classes.items():
            lines.append(f"{name:<16}{c.gt_count:>7}{c.det_count:>7}{c.ap:>8.3f}"
                         f"{c.ap_per_threshold[0]:>8.3f}{c.ap_per_threshold[5]:>8.3f}")
        lines.append(f"{'mAP':<30}{self.mean_ap:>8.3f}{self.ap_at(0.5):>8.3f}{self.ap_at(0.75):>8.3f}")
        return "\n".join(lines)


def evaluate(
    dets: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[GroundTruthObject]],
    label_map: LabelMap | None = None,
) -> EvaluationReport:
    """``dets`` and ``gts`` map image ids to per-image lists. Detections
    on images without GT entries count as false positives."""
    images = list(gts) + [k for k in dets if k not in gts]
    if label_map is not None:
        names = label_map.names()
    else:
        names = sorted({g.label for v in gts.values() for g in v} | {d.label for v in dets.values() for d in v})
    gt_counts = Counter(g.label for v in gts.values() for g in v)
    if not gt_counts:
        raise GroundTruthError("$", "no ground-truth objects to evaluate against")

    results: dict[str, ClassResult] = {}
    skipped = []
    for name in names:
        n_gt = gt_counts.get(name, 0)
        if n_gt == 0:
            skipped.append(name)
            continue
        per_image = []
        for img in images:
            d = sort_by_score(x for x in dets.get(img, ()) if x.label == name)[:MAX_DETS]
            g = [x for x in gts.get(img, ()) if x.label == name]
            per_image.append((d, g))
        aps, prec50 = [], []
        for t in IOU_THRESHOLDS:
            scores, tps = [], []
            for d, g in per_image:
                m = match(d, g, t)
                scores.extend(x.score for x in d)
                tps.extend(m.tp)
            p, r = precision_recall(scores, tps, n_gt)
            curve = interpolated_precision(p, r)
            aps.append(float(curve.mean()))
            if not prec50:
                prec50 = [round(float(v), 6) for v in curve]
        results[name] = ClassResult(name, n_gt, sum(len(d) for d, _ in per_image), aps, prec50)
    return EvaluationReport(results, len(images), skipped)


def load_detections(path: str | Path, image_ids: Mapping[int, str] | None = None) -> dict[str, list[Detection]]:
    """JSON lines of ``{"image_id", "label", "score", "box": [x, y, w, h]}``.
    Integer image ids are mapped to file names through ``image_ids``."""
    out: dict[str, list[Detection]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}:{n}"
        try:
            rec = json.loads(line)
            image, label, score, box = rec["image_id"], rec["label"], rec["score"], rec["box"]
            det = Detection(BoundingBox.from_xywh(*(float(v) for v in box)), str(label), float(score))
        except (ValueError, KeyError, TypeError) as exc:
            raise GroundTruthError(where, f"bad detection record: {exc}") from None
        if isinstance(image, int) and not isinstance(image, bool):
            if image_ids is None or image not in image_ids:
                raise GroundTruthError(f"{where}.image_id", f"unknown image id {image}")
            image = image_ids[image]
        out.setdefault(str(image), []).append(det)
    return out


# -- drift -------------------------------------------------------------------

def drift_divergence(reference: Mapping[str, float], current: Mapping[str, float]) -> float:
    """Total-variation distance between two class histograms."""
    rt, ct = sum(reference.values()), sum(current.values())
    if rt <= 0 or ct <= 0:
        raise ValueError("histograms must be non-empty")
    keys = set(reference) | set(current)
    return 0.5 * sum(abs(reference.get(k, 0) / rt - current.get(k, 0) / ct) for k in keys)


@dataclass(frozen=True)
class DriftSignal:
    window_index: int
    divergence: float
    reference: dict[str, int]
    current: dict[str, int]


class DriftMonitor:
    """Cuts the label stream into windows of ``window`` labels. The first
    window is the reference. A signal fires when ``k`` consecutive windows
    diverge from it by more than ``threshold``; the reference then moves
    to the window that fired and the count restarts."""

    def __init__(self, window: int, threshold: float, k: int = 1):
        if window < 1 or k < 1:
            raise ValueError("window and k must be >= 1")
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must be in [0,1]")
        self.window, self.threshold, self.k = window, threshold, k
        self.reference: Counter | None = None
        self._current: Counter = Counter()
        self._filled = 0
        self.windows_closed = 0
        self._streak = 0
        self.signals: list[DriftSignal] = []
        self.divergences: list[float] = []

    def observe(self, label: str) -> DriftSignal | None:
        self._current[label] += 1
        self._filled += 1
        if self._filled < self.window:
            return None
        hist, self._current, self._filled = self._current, Counter(), 0
        index = self.windows_closed
        self.windows_closed += 1
        if self.reference is None:
            self.reference = hist
            return None
        tv = drift_divergence(self.reference, hist)
        self.divergences.append(tv)
        self._streak = self._streak + 1 if tv > self.threshold else 0
        if self._streak < self.k:
            return None
        sig = DriftSignal(index, tv, dict(self.reference), dict(hist))
        self.signals.append(sig)
        self.reference = hist
        self._streak = 0
        return sig

    def observe_many(self, labels: Iterable[str]) -> list[DriftSignal]:
        return [s for s in (self.observe(x) for x in labels) if s is not None]
