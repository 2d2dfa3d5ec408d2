"""Unsupervised sim-to-real adaptation for cooperative LiDAR detection."""
from coopadapt.core import (
    AgentFrame,
    AgentType,
    Box,
    BoxSet,
    CollaborativeSample,
    Domain,
    InvariantError,
    PointCloud,
    Pose,
    project_to_ego,
)
from coopadapt.kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "AgentFrame", "AgentType", "Box", "BoxSet", "CollaborativeSample", "Domain",
    "InvariantError", "PointCloud", "Pose", "project_to_ego", "BACKEND",
]
