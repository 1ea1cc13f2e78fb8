"""
LiDAR MOS - moving object segmentation for sequential LiDAR scans

Residual scans from ego-motion-compensated history, a cylindrical voxel
network with hand-written gradients, scan-context loop closure and
moving-point map cleaning, all runnable on synthetic dynamic scenes.
"""

from .errors import MosError, ConfigError, EXIT_CODES
from .geometry import PoseSE3, compose_relative, relative_from_world, world_from_relative
from .kitti_io import MotionLabel, RawScan, SequenceLayout, load_sequence
from .residual import ResidualStack, build_residual_stack, spatial_diff_baseline
from .cylvoxel import CylindricalGridSpec, assign_voxels
from .net import MosModel, ModelConfig, predict_motion
from .loss import LossConfig, total_loss
from .evaluation import ConfusionCounts, confusion, iou, miou, ate, drift, pr_curve, f1_max
from .loopclosure import LoopConfig, LoopClosureDetector
from .mapops import GlobalMap, aggregate_map, filter_moving
from .synth import SynthSceneSpec, generate_sequence, scenario

__version__ = "0.1.0"

__all__ = [
    # Errors
    "MosError",
    "ConfigError",
    "EXIT_CODES",
    # Geometry and I/O
    "PoseSE3",
    "compose_relative",
    "relative_from_world",
    "world_from_relative",
    "MotionLabel",
    "RawScan",
    "SequenceLayout",
    "load_sequence",
    # Residuals and voxels
    "ResidualStack",
    "build_residual_stack",
    "spatial_diff_baseline",
    "CylindricalGridSpec",
    "assign_voxels",
    # Model and loss
    "MosModel",
    "ModelConfig",
    "predict_motion",
    "LossConfig",
    "total_loss",
    # Evaluation
    "ConfusionCounts",
    "confusion",
    "iou",
    "miou",
    "ate",
    "drift",
    "pr_curve",
    "f1_max",
    # Loop closure and maps
    "LoopConfig",
    "LoopClosureDetector",
    "GlobalMap",
    "aggregate_map",
    "filter_moving",
    # Synthetic data
    "SynthSceneSpec",
    "generate_sequence",
    "scenario",
]
