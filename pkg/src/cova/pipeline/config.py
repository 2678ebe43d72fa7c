"""Pipeline configuration: parsing and validation of the JSON file.

Two layouts are accepted. A list::

    {"pipeline": [{"stage": "capture", "plugin": "raw_video", "params": {...}}, ...],
     "label_map": ["person", "car"], "target_classes": ["person"], ...}

or a mapping keyed by stage name (``capture`` or ``COVACapture``)::

    {"pipeline": {"COVACapture": {"plugin": "raw_video", "params": {...}}, ...}, ...}

Errors name the JSON path of the first violation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..clock import parse_instant
from ..dataset import fingerprint
from ..errors import ConfigError
from ..geometry import LabelMap

STAGES = ("capture", "filter", "annotate", "dataset", "train")
STAGE_ALIASES = {f"cova{s}": s for s in STAGES}

DEFAULT_QUEUE_CAPACITY = 64

REQUIRED = object()


@dataclass(frozen=True)
class Param:
    kind: type | tuple[type, ...]
    default: Any = REQUIRED
    choices: tuple[Any, ...] | None = None
    minimum: float | None = None
    maximum: float | None = None
    nullable: bool = False


def _type_name(kind) -> str:
    kinds = kind if isinstance(kind, tuple) else (kind,)
    names = {int: "integer", float: "number", str: "string", bool: "boolean", list: "list", dict: "object"}
    return " or ".join(names.get(k, k.__name__) for k in kinds)


def check_value(value: Any, p: Param, path: str) -> Any:
    if value is None:
        if p.nullable:
            return None
        raise ConfigError(path, "must not be null")
    kinds = p.kind if isinstance(p.kind, tuple) else (p.kind,)
    ok = isinstance(value, kinds) and not (isinstance(value, bool) and bool not in kinds)
    if not ok and float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value, ok = float(value), True
    if not ok:
        raise ConfigError(path, f"expected {_type_name(p.kind)}, got {type(value).__name__} {value!r}")
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    if p.choices is not None and value not in p.choices:
        raise ConfigError(path, f"must be one of {list(p.choices)}, got {value!r}")
    if p.minimum is not None and value < p.minimum:
        raise ConfigError(path, f"must be >= {p.minimum}, got {value!r}")
    if p.maximum is not None and value > p.maximum:
        raise ConfigError(path, f"must be <= {p.maximum}, got {value!r}")
    return value


def check_params(raw: Any, spec: dict[str, Param], path: str) -> dict[str, Any]:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "params must be an object")
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", f"unknown parameter; accepted: {sorted(spec)}")
    out = {}
    for name, p in spec.items():
        if name in raw:
            out[name] = check_value(raw[name], p, f"{path}.{name}")
        elif p.default is REQUIRED:
            raise ConfigError(f"{path}.{name}", "required parameter is missing")
        else:
            out[name] = p.default
    return out


@dataclass(frozen=True)
class StageConfig:
    stage: str
    plugin: str
    params: dict[str, Any]
    path: str


@dataclass(frozen=True)
class DriftConfig:
    window: int
    threshold: float
    k: int = 2
    rearm: bool = False
    max_runs: int = 3


GLOBAL_PARAMS = {
    "label_map": Param(list),
    "target_classes": Param(list),
    "target_image_count": Param(int, 1000, minimum=1),
    "deadline": Param(str, None, nullable=True),
    "deadline_seconds": Param(float, None, minimum=0, nullable=True),
    "eval_fraction": Param(float, 0.0, minimum=0.0, maximum=0.99),
    "queue_capacity": Param(int, DEFAULT_QUEUE_CAPACITY, minimum=1),
    "drift": Param(dict, None, nullable=True),
    "pipeline": Param((list, dict)),
}

DRIFT_PARAMS = {
    "window": Param(int, minimum=1),
    "threshold": Param(float, 0.5, minimum=0.0, maximum=1.0),
    "k": Param(int, 2, minimum=1),
    "rearm": Param(bool, False),
    "max_runs": Param(int, 3, minimum=1),
}


@dataclass
class PipelineConfig:
    stages: dict[str, StageConfig]
    label_map: LabelMap
    target_classes: tuple[str, ...]
    target_image_count: int = 1000
    deadline_seconds: float | None = None
    deadline_instant: float | None = None
    eval_fraction: float = 0.0
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    drift: DriftConfig | None = None
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    def stage(self, name: str) -> StageConfig:
        return self.stages[name]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.raw)

    def deadline_after(self, start: float) -> float | None:
        """Seconds from ``start`` until the deadline, whichever form was given."""
        options = []
        if self.deadline_seconds is not None:
            options.append(self.deadline_seconds)
        if self.deadline_instant is not None:
            options.append(max(0.0, self.deadline_instant - start))
        return min(options) if options else None


def _canonical_stage(name: Any, path: str) -> str:
    if not isinstance(name, str):
        raise ConfigError(path, "stage name must be a string")
    key = name.lower()
    key = STAGE_ALIASES.get(key, key)
    if key not in STAGES:
        raise ConfigError(path, f"unknown stage {name!r}; expected one of {list(STAGES)}")
    return key


def _stage_entries(pipeline: Any) -> list[tuple[str, str, dict[str, Any]]]:
    """(json path, canonical stage, entry) triples in file order."""
    out = []
    if isinstance(pipeline, list):
        for i, entry in enumerate(pipeline):
            p = f"$.pipeline[{i}]"
            if not isinstance(entry, dict):
                raise ConfigError(p, "stage entry must be an object")
            if "stage" not in entry:
                raise ConfigError(f"{p}.stage", "missing")
            out.append((p, _canonical_stage(entry["stage"], f"{p}.stage"), entry))
    else:
        for name, entry in pipeline.items():
            p = f"$.pipeline.{name}"
            if not isinstance(entry, dict):
                raise ConfigError(p, "stage entry must be an object")
            out.append((p, _canonical_stage(name, p), entry))
    return out


def parse_config(text: str | bytes | dict[str, Any], base_dir: str | Path | None = None) -> PipelineConfig:
    from .registry import REGISTRY  # plugins import this module

    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise ConfigError("$", f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be a JSON object")
    g = check_params(doc, GLOBAL_PARAMS, "$")

    names = g["label_map"]
    for i, n in enumerate(names):
        if not isinstance(n, str) or not n:
            raise ConfigError(f"$.label_map[{i}]", "class names must be non-empty strings")
    try:
        label_map = LabelMap(names)
    except ValueError as exc:
        raise ConfigError("$.label_map", str(exc)) from None
    targets = g["target_classes"]
    if not targets:
        raise ConfigError("$.target_classes", "must not be empty")
    for i, t in enumerate(targets):
        if t not in label_map:
            raise ConfigError(f"$.target_classes[{i}]", f"{t!r} is not in the label map")

    deadline_instant = None
    if g["deadline"] is not None:
        try:
            deadline_instant = parse_instant(g["deadline"])
        except ValueError:
            raise ConfigError("$.deadline", f"not an ISO-8601 instant: {g['deadline']!r}") from None

    drift = None
    if g["drift"] is not None:
        drift = DriftConfig(**check_params(g["drift"], DRIFT_PARAMS, "$.drift"))

    stages: dict[str, StageConfig] = {}
    for p, stage, entry in _stage_entries(g["pipeline"]):
        if "plugin_path" in entry:
            raise ConfigError(f"{p}.plugin_path",
                              "loading plugin code from a path is not supported; "
                              "register plugins in cova.pipeline.registry instead (see README)")
        extra = sorted(set(entry) - {"stage", "plugin", "params"})
        if extra:
            raise ConfigError(f"{p}.{extra[0]}", "unknown key; a stage entry has stage, plugin and params")
        if stage in stages:
            raise ConfigError(p, f"duplicate {stage} stage (first at {stages[stage].path})")
        plugin = entry.get("plugin")
        if not isinstance(plugin, str):
            raise ConfigError(f"{p}.plugin", "missing or not a string")
        spec = REGISTRY.get(stage, plugin)
        if spec is None:
            raise ConfigError(f"{p}.plugin",
                              f"unknown {stage} plugin {plugin!r}; available: {REGISTRY.names(stage)}")
        params = check_params(entry.get("params"), spec.params, f"{p}.params")
        if spec.validate is not None:
            spec.validate(params, f"{p}.params")
        stages[stage] = StageConfig(stage, plugin, params, p)
    missing = [s for s in STAGES if s not in stages]
    if missing:
        raise ConfigError("$.pipeline", f"missing stage(s): {missing}")

    return PipelineConfig(
        stages=stages,
        label_map=label_map,
        target_classes=tuple(targets),
        target_image_count=g["target_image_count"],
        deadline_seconds=g["deadline_seconds"],
        deadline_instant=deadline_instant,
        eval_fraction=g["eval_fraction"],
        queue_capacity=g["queue_capacity"],
        drift=drift,
        base_dir=Path(base_dir) if base_dir is not None else Path.cwd(),
        raw=doc,
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from None
    return parse_config(text, base_dir=path.parent)
