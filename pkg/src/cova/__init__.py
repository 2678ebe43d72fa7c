"""Motion-aware automatic dataset collection for static-camera video:
background subtraction, region cropping, teacher annotation over HTTP,
COCO dataset assembly, evaluation and drift monitoring."""

from .geometry import BoundingBox, Detection, Frame, GroundTruthObject, LabelMap, iou

__version__ = "0.1.0"

__all__ = ["BoundingBox", "Detection", "Frame", "GroundTruthObject", "LabelMap", "iou", "__version__"]
