"""Built-in plugins for each stage, keyed by (stage, name).

New plugins are added in code with :meth:`PluginRegistry.register`; the
config file can only select among registered names.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from ..annotate import AnnotatorConfig, HttpAnnotator
from ..background import FIRST_FRAME, MOG, BackgroundParams
from ..capture import IMAGE_DIRECTORY, RAW_VIDEO, FrameSource
from ..dataset import TRAINABLE_LAYERS, TrainerReport, TrainerSpec, invoke_trainer
from ..errors import ConfigError
from ..filters import (
    MODES, PER_REGION, FilterItem, MotionDetector, RegionDeduplicator, crops_for_regions, filter_no_op,
)
from ..geometry import Frame
from ..teacher import DegradationProfile, LocalTeacherAnnotator, Teacher, load_ground_truth
from .config import Param, PipelineConfig


@dataclass(frozen=True)
class PluginSpec:
    stage: str
    name: str
    params: dict[str, Param]
    build: Callable[[dict[str, Any], PipelineConfig], Any]
    validate: Callable[[dict[str, Any], str], None] | None = None


class PluginRegistry:
    def __init__(self) -> None:
        self._plugins: dict[tuple[str, str], PluginSpec] = {}

    def register(self, spec: PluginSpec) -> PluginSpec:
        key = (spec.stage, spec.name)
        if key in self._plugins:
            raise ValueError(f"plugin {spec.stage}/{spec.name} already registered")
        self._plugins[key] = spec
        return spec

    def get(self, stage: str, name: str) -> PluginSpec | None:
        return self._plugins.get((stage, name))

    def names(self, stage: str) -> list[str]:
        return sorted(n for s, n in self._plugins if s == stage)

    def build(self, cfg: PipelineConfig, stage: str) -> Any:
        sc = cfg.stage(stage)
        return self._plugins[(stage, sc.plugin)].build(sc.params, cfg)


REGISTRY = PluginRegistry()


# -- capture -----------------------------------------------------------------

CAPTURE_PARAMS = {
    "path": Param(str, None, nullable=True),
    "paths": Param(list, None, nullable=True),
    "frame_rate": Param(float, 25.0, minimum=1e-6),
    "loop": Param(bool, False),
}


def _check_capture(params: dict[str, Any], path: str) -> None:
    if (params["path"] is None) == (params["paths"] is None):
        raise ConfigError(path, "exactly one of 'path' or 'paths' is required")
    if params["paths"] is not None:
        if not params["paths"] or not all(isinstance(p, str) for p in params["paths"]):
            raise ConfigError(f"{path}.paths", "must be a non-empty list of strings")


def _capture_builder(kind: str):
    def build(params: dict[str, Any], cfg: PipelineConfig) -> list[FrameSource]:
        paths = params["paths"] if params["paths"] is not None else [params["path"]]
        sources = []
        for p in paths:
            try:
                sources.append(FrameSource(kind, cfg.resolve(p), params["frame_rate"], params["loop"]))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"{cfg.stage('capture').path}.params", str(exc)) from None
        ids = [s.stream_id for s in sources]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"{cfg.stage('capture').path}.params.paths", f"stream ids collide: {ids}")
        return sources
    return build


REGISTRY.register(PluginSpec("capture", IMAGE_DIRECTORY, CAPTURE_PARAMS, _capture_builder(IMAGE_DIRECTORY),
                             _check_capture))
REGISTRY.register(PluginSpec("capture", RAW_VIDEO, CAPTURE_PARAMS, _capture_builder(RAW_VIDEO), _check_capture))


# -- filter ------------------------------------------------------------------

_bg = BackgroundParams()
MOTION_PARAMS = {
    "background": Param(str, MOG, choices=(MOG, FIRST_FRAME)),
    "components": Param(int, _bg.k, minimum=1),
    "learning_rate": Param(float, _bg.alpha),
    "background_ratio": Param(float, _bg.background_weight_threshold),
    "match_sigmas": Param(float, _bg.match_sigmas),
    "initial_variance": Param(float, _bg.initial_variance),
    "initial_weight": Param(float, _bg.initial_weight),
    "variance_floor": Param(float, _bg.variance_floor),
    "blur_sigma": Param(float, _bg.blur_sigma),
    "diff_threshold": Param(int, _bg.diff_threshold, minimum=0, maximum=255),
    "dilate_radius": Param(int, 1, minimum=0),
    "dilate_iterations": Param(int, 2, minimum=0),
    "min_area": Param(int, None, minimum=1, nullable=True),
    "warmup_frames": Param(int, 0, minimum=0),
}
REGION_PARAMS = {
    **MOTION_PARAMS,
    "mode": Param(str, PER_REGION, choices=MODES),
    "padding": Param(int, 8, minimum=0),
    "dedup_threshold": Param(float, None, minimum=0, nullable=True),
}


def _background_params(params: dict[str, Any]) -> BackgroundParams:
    return BackgroundParams(
        k=params["components"],
        alpha=params["learning_rate"],
        background_weight_threshold=params["background_ratio"],
        match_sigmas=params["match_sigmas"],
        initial_variance=params["initial_variance"],
        initial_weight=params["initial_weight"],
        variance_floor=params["variance_floor"],
        blur_sigma=params["blur_sigma"],
        diff_threshold=params["diff_threshold"],
    )


def _check_motion(params: dict[str, Any], path: str) -> None:
    try:
        _background_params(params)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


StreamFilter = Callable[[Frame], list[FilterItem]]


class NoFilter:
    def for_stream(self) -> StreamFilter:
        return filter_no_op


class MotionFilter:
    """Builds one stateful filter per stream."""

    def __init__(self, params: dict[str, Any], regions: bool):
        self.params = params
        self.regions = regions

    def detector(self) -> MotionDetector:
        p = self.params
        return MotionDetector(p["background"], _background_params(p), p["dilate_radius"],
                              p["dilate_iterations"], p["min_area"])

    def for_stream(self) -> StreamFilter:
        det = self.detector()
        p = self.params
        dedup = RegionDeduplicator(p["dedup_threshold"]) if self.regions and p.get("dedup_threshold") else None

        def run(frame: Frame) -> list[FilterItem]:
            regions = det.regions(frame)
            if frame.index < p["warmup_frames"] or not regions:
                return []
            if not self.regions:
                return filter_no_op(frame)
            items = crops_for_regions(frame, regions, p["mode"], p["padding"])
            if dedup is not None:
                items = [it for it in items if dedup.keep(it)]
            return [FilterItem(it.frame, it.region, i) for i, it in enumerate(items)]

        return run


REGISTRY.register(PluginSpec("filter", "no_filter", {}, lambda p, c: NoFilter()))
REGISTRY.register(PluginSpec("filter", "filter_static_frames", MOTION_PARAMS,
                             lambda p, c: MotionFilter(p, regions=False), _check_motion))
REGISTRY.register(PluginSpec("filter", "moving_objects_only", REGION_PARAMS,
                             lambda p, c: MotionFilter(p, regions=True), _check_motion))


# -- annotate ----------------------------------------------------------------

HTTP_PARAMS = {
    "endpoint": Param(str),
    "min_confidence": Param(float, 0.3, minimum=0.0, maximum=1.0),
    "timeout_ms": Param(int, 10_000, minimum=1),
    "max_retries": Param(int, 3, minimum=0),
    "max_in_flight": Param(int, 4, minimum=1),
    "backoff_ms": Param(int, 100, minimum=0),
}

ORACLE_PARAMS = {
    "ground_truth": Param(str),
    "profile": Param((str, dict), None, nullable=True),
    "seed": Param(int, None, nullable=True),
    "min_confidence": Param(float, 0.3, minimum=0.0, maximum=1.0),
    "max_in_flight": Param(int, 1, minimum=1),
}


def _build_http(params: dict[str, Any], cfg: PipelineConfig) -> HttpAnnotator:
    ann = HttpAnnotator(AnnotatorConfig(
        endpoint=params["endpoint"],
        min_confidence=params["min_confidence"],
        target_classes=cfg.target_classes,
        timeout_ms=params["timeout_ms"],
        max_retries=params["max_retries"],
        max_in_flight=params["max_in_flight"],
        backoff_ms=params["backoff_ms"],
    ))
    ann.workers = params["max_in_flight"]
    return ann


def _build_oracle(params: dict[str, Any], cfg: PipelineConfig) -> LocalTeacherAnnotator:
    path = cfg.stage("annotate").path + ".params"
    try:
        store = load_ground_truth(cfg.resolve(params["ground_truth"]))
        prof = params["profile"]
        if prof is None:
            profile = DegradationProfile()
        elif isinstance(prof, dict):
            profile = DegradationProfile.from_dict(prof)
        else:
            profile = DegradationProfile.load(cfg.resolve(prof))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None
    if params["seed"] is not None:
        profile = DegradationProfile.from_dict({**profile.to_dict(), "seed": params["seed"]})
    ann = LocalTeacherAnnotator(Teacher(store, profile), params["min_confidence"], cfg.target_classes)
    ann.workers = params["max_in_flight"]
    return ann


REGISTRY.register(PluginSpec("annotate", "http", HTTP_PARAMS, _build_http))
REGISTRY.register(PluginSpec("annotate", "rest", HTTP_PARAMS, _build_http))
REGISTRY.register(PluginSpec("annotate", "oracle_file", ORACLE_PARAMS, _build_oracle))


# -- dataset -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetStage:
    output_dir: Path
    min_instances: int


REGISTRY.register(PluginSpec(
    "dataset", "default",
    {"output_dir": Param(str), "min_instances": Param(int, 10, minimum=0)},
    lambda p, c: DatasetStage(c.resolve(p["output_dir"]), p["min_instances"]),
))


# -- train -------------------------------------------------------------------

class NoTrainer:
    def run(self, dataset_dir: Path) -> TrainerReport | None:
        return None


class ExternalTrainer:
    def __init__(self, spec: TrainerSpec, output_dir: Path | None, timeout_s: float | None):
        self.spec = spec
        self.output_dir = output_dir
        self.timeout_s = timeout_s

    def run(self, dataset_dir: Path) -> TrainerReport:
        out = self.output_dir or dataset_dir / "model"
        return invoke_trainer(self.spec, dataset_dir, dataset_dir / "label_map.json", out,
                              log_path=dataset_dir / "trainer.log", timeout_s=self.timeout_s)


TRAIN_PARAMS = {
    "command": Param(str),
    "trainable_layers": Param(str, "BoxRegression", choices=TRAINABLE_LAYERS),
    "epochs": Param(int, None, minimum=1, nullable=True),
    "output_dir": Param(str, None, nullable=True),
    "timeout_s": Param(float, None, minimum=0, nullable=True),
}


def _check_train(params: dict[str, Any], path: str) -> None:
    if "{dataset_dir}" not in params["command"]:
        raise ConfigError(f"{path}.command", "must contain the {dataset_dir} placeholder")


def _build_train(params: dict[str, Any], cfg: PipelineConfig) -> ExternalTrainer:
    spec = TrainerSpec(params["command"], params["trainable_layers"], params["epochs"])
    out = cfg.resolve(params["output_dir"]) if params["output_dir"] else None
    return ExternalTrainer(spec, out, params["timeout_s"])


REGISTRY.register(PluginSpec("train", "external_command", TRAIN_PARAMS, _build_train, _check_train))
REGISTRY.register(PluginSpec("train", "none", {}, lambda p, c: NoTrainer()))
