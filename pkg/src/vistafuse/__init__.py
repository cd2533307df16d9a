"""Decoupled cross-view attention fusion for voxelized point clouds."""

from .config import RunConfig, load_config, parse_config
from .estimator import VistaDetector
from .harness import SceneSample, TrainConfig, generate_scene, generate_scenes, train_smoke
from .losses import BoxFootprint
from .model import ModelConfig, VistaNet
from .ndcore import Tensor, grad_check
from .voxelizer import PointCloud, VoxelConfig, desk_config, voxelize

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "parse_config",
    "VistaDetector",
    "SceneSample",
    "TrainConfig",
    "generate_scene",
    "generate_scenes",
    "train_smoke",
    "BoxFootprint",
    "ModelConfig",
    "VistaNet",
    "Tensor",
    "grad_check",
    "PointCloud",
    "VoxelConfig",
    "desk_config",
    "voxelize",
]
