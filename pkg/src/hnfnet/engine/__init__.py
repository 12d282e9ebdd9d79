from .inference import (
    TTA_FLIPS,
    InferConfig,
    PatchGrid,
    axis_starts,
    center_crop_slices,
    infer_study,
    make_patch_grid,
    postprocess,
    predict_probabilities,
    regions_to_labels,
)
from .losses import generalized_dice_loss, region_loss
from .optim import AdamState, adam_step, lr_schedule
from .training import TrainConfig, region_targets, train

__all__ = [
    "AdamState",
    "InferConfig",
    "PatchGrid",
    "TTA_FLIPS",
    "TrainConfig",
    "adam_step",
    "axis_starts",
    "center_crop_slices",
    "generalized_dice_loss",
    "infer_study",
    "lr_schedule",
    "make_patch_grid",
    "postprocess",
    "predict_probabilities",
    "region_loss",
    "region_targets",
    "regions_to_labels",
    "train",
]
