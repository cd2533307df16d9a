"""Synthetic data, augmentation, target assignment, training and attention metrics."""

from .io import FormatError, read_scene, read_scene_dir, write_scene
from .augment import AugmentParams, apply_augmentation, augment, draw_params
from .metrics import attention_concentration, object_cells
from .scenes import SceneSample, generate_scene, generate_scenes
from .targets import assign_targets
from .training import AdamW, TrainConfig, TrainingDiverged, TrainResult, evaluate_concentration, train_smoke

__all__ = [
    "FormatError",
    "read_scene",
    "read_scene_dir",
    "write_scene",
    "AugmentParams",
    "apply_augmentation",
    "augment",
    "draw_params",
    "attention_concentration",
    "object_cells",
    "SceneSample",
    "generate_scene",
    "generate_scenes",
    "assign_targets",
    "AdamW",
    "TrainConfig",
    "TrainingDiverged",
    "TrainResult",
    "evaluate_concentration",
    "train_smoke",
]
