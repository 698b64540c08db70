from .model import (
    KINDS,
    Batch,
    FusionModel,
    ModelConfig,
    build_window,
    encode_appearance,
    encode_patch,
    forward_prt,
    fuse_pr,
    fuse_tracklet,
    predict_object_depth,
)
from .train import TrainConfig, TrainingDiverged, loss_and_gradients, train

__all__ = [
    "KINDS",
    "Batch",
    "FusionModel",
    "ModelConfig",
    "TrainConfig",
    "TrainingDiverged",
    "build_window",
    "encode_appearance",
    "encode_patch",
    "forward_prt",
    "fuse_pr",
    "fuse_tracklet",
    "loss_and_gradients",
    "predict_object_depth",
    "train",
]
