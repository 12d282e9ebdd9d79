"""High-resolution multi-scale 3D brain tumor segmentation."""
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import InferConfig, TrainConfig, infer_study, train
from .estimator import HNFNetSegmenter
from .metrics import aggregate, dice, evaluate_case, hd95, regions_from_labels
from .network import HNFNet, NetworkConfig, build, count_parameters, estimate_flops

__version__ = "0.1.0"

__all__ = [
    "HNFNet",
    "HNFNetSegmenter",
    "InferConfig",
    "NetworkConfig",
    "TrainConfig",
    "aggregate",
    "build",
    "count_parameters",
    "dice",
    "estimate_flops",
    "evaluate_case",
    "hd95",
    "infer_study",
    "load_checkpoint",
    "regions_from_labels",
    "save_checkpoint",
    "train",
]
