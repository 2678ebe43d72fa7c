from __future__ import annotations


class CovaError(Exception):
    """Base class for pipeline errors."""


class ConfigError(CovaError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class AnnotationError(CovaError):
    """A single annotation request failed; the item is skipped."""


class ProtocolError(AnnotationError):
    """The annotation service answered with something we cannot parse."""


class AnnotationUnavailable(CovaError):
    """The annotation service cannot be reached at all."""


class DatasetError(CovaError):
    pass


class GroundTruthError(CovaError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TrainerFailed(CovaError):
    def __init__(self, report):
        super().__init__(f"trainer exited with status {report.returncode}")
        self.report = report
