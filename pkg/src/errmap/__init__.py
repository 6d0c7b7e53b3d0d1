"""Depth completion with learned per-pixel error maps.

A from-scratch differentiable tensor core powers a twin-head encoder-decoder
that predicts dense depth together with its own expected error, trained with
stop-gradient error labels and a self-normalizing ratio loss. Around the
network: LiDAR/depth-map projection (including a 360-degree virtual rig),
KITTI-style 16-bit depth PNG and point-cloud I/O, a procedural scene
generator for desk-scale experiments, and a keep-ratio evaluation kit.
"""

from .autograd import Tensor, backward, finite_diff_gradcheck, stop_gradient
from .depthio import DepthMap, ErrorMap, PointCloud
from .network import (
    FilterSpec,
    NetworkConfig,
    Parameters,
    PredictionBundle,
    build,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .trainer import TrainConfig, train
from .evalkit import FilterReport, filter_by_threshold, keep_ratio_to_threshold, metrics, sweep

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_gradcheck",
    "stop_gradient",
    "DepthMap",
    "ErrorMap",
    "PointCloud",
    "FilterSpec",
    "NetworkConfig",
    "Parameters",
    "PredictionBundle",
    "build",
    "forward",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "train",
    "FilterReport",
    "filter_by_threshold",
    "keep_ratio_to_threshold",
    "metrics",
    "sweep",
    "__version__",
]
