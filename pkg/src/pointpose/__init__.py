"""Generative 3D human pose estimation from sequential point clouds."""

from .config import ExperimentConfig, load_config
from .core import (
    PointCloudSequence,
    PoseFrame,
    PoseSequence,
    SkeletonGraph,
    angular_error,
    decode_rotation,
    encode_rotation,
    mpjpe,
)
from .model import GenerativePoseModel, build_schedule
from .regressor import CfmSchedule, DmSchedule

__all__ = [
    "CfmSchedule",
    "DmSchedule",
    "ExperimentConfig",
    "GenerativePoseModel",
    "PointCloudSequence",
    "PoseFrame",
    "PoseSequence",
    "SkeletonGraph",
    "angular_error",
    "build_schedule",
    "decode_rotation",
    "encode_rotation",
    "load_config",
    "mpjpe",
]
