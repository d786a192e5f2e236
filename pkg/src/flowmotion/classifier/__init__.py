"""From-scratch residual classifier over 2-channel flow ROIs."""

from .network import (
    ModelParams,
    NetConfig,
    backward,
    forward,
    init_params,
    loss_and_grads,
    loss_bce,
)
from .optim import TrainConfig, lr_at_epoch, sgd_step
from .training import TrainResult, evaluate, predict, predict_proba, train

__all__ = [
    "ModelParams",
    "NetConfig",
    "TrainConfig",
    "TrainResult",
    "backward",
    "evaluate",
    "forward",
    "init_params",
    "loss_and_grads",
    "loss_bce",
    "lr_at_epoch",
    "predict",
    "predict_proba",
    "sgd_step",
    "train",
]
