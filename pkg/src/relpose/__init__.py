"""Relative object pose from masked descriptor matching and robust rigid registration."""

from .errors import (
    InputFormatError,
    InvariantError,
    MatchingError,
    RegistrationError,
    RelPoseError,
)
from .geometry import CameraIntrinsics, RigidTransform, compose, invert, rotation_error
from .losses import LossParams, MatchSupervision, total_loss
from .matching import MatchSet, match_feature_maps, match_nearest_neighbor
from .metrics import ObjectModel, average_recall
from .pipeline import PipelineConfig, estimate_relative_pose, run_scene
from .registration import RegistrationParams, kabsch, register
from .synth import SyntheticSceneSpec, make_scene_pair

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "InputFormatError",
    "InvariantError",
    "LossParams",
    "MatchSet",
    "MatchSupervision",
    "MatchingError",
    "ObjectModel",
    "PipelineConfig",
    "RegistrationError",
    "RegistrationParams",
    "RelPoseError",
    "RigidTransform",
    "SyntheticSceneSpec",
    "average_recall",
    "compose",
    "estimate_relative_pose",
    "invert",
    "kabsch",
    "make_scene_pair",
    "match_feature_maps",
    "match_nearest_neighbor",
    "register",
    "rotation_error",
    "run_scene",
    "total_loss",
]
