"""Networks, losses and training for the toy pose estimator."""

from .losses import (
    CategoryStats,
    LossParts,
    LossWeights,
    chamfer_loss,
    compute_category_stats,
    residual_loss,
    residual_targets,
    segmentation_loss,
    total_loss,
)
from .model import (
    HeadGrads,
    ToyForward,
    ToyModel,
    ToyModelConfig,
    backward,
    forward,
    load_model,
    predict_pose,
    save_model,
)
from .train import (
    AdamState,
    EpochLog,
    TrainConfig,
    TrainSample,
    adam_step,
    lr_for_epoch,
    sample_losses_and_grads,
    train_toy,
    write_loss_log,
)

__all__ = [
    "AdamState",
    "CategoryStats",
    "EpochLog",
    "HeadGrads",
    "LossParts",
    "LossWeights",
    "ToyForward",
    "ToyModel",
    "ToyModelConfig",
    "TrainConfig",
    "TrainSample",
    "adam_step",
    "backward",
    "chamfer_loss",
    "compute_category_stats",
    "forward",
    "load_model",
    "lr_for_epoch",
    "predict_pose",
    "residual_loss",
    "residual_targets",
    "sample_losses_and_grads",
    "save_model",
    "segmentation_loss",
    "total_loss",
    "train_toy",
    "write_loss_log",
]
