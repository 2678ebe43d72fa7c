from .config import PipelineConfig, load_config, parse_config
from .registry import REGISTRY, PluginRegistry, PluginSpec
from .runner import (
    EXIT_ANNOTATION_UNAVAILABLE, EXIT_CONFIG, EXIT_EMPTY_DATASET, EXIT_OK, EXIT_TRAINER_FAILED,
    PipelineRun, RunMetrics, RunReport, run,
)

__all__ = [
    "PipelineConfig", "load_config", "parse_config", "REGISTRY", "PluginRegistry", "PluginSpec",
    "PipelineRun", "RunMetrics", "RunReport", "run",
    "EXIT_OK", "EXIT_EMPTY_DATASET", "EXIT_CONFIG", "EXIT_ANNOTATION_UNAVAILABLE", "EXIT_TRAINER_FAILED",
]
