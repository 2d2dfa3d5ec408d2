"""Pillar encoder, cooperative fusion, anchor head and detection losses."""
from coopadapt.detector.boxes import AnchorConfig, assign_targets, decode_boxes, make_anchors, nms
from coopadapt.detector.grid import GridConfig, pillarize
from coopadapt.detector.losses import confidence_map, detection_loss
from coopadapt.detector.model import CooperativeDetector, DetectorConfig

__all__ = [
    "AnchorConfig", "assign_targets", "decode_boxes", "make_anchors", "nms", "GridConfig",
    "pillarize", "confidence_map", "detection_loss", "CooperativeDetector", "DetectorConfig",
]
