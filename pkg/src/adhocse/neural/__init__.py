"""Mask estimator with an optional squeeze-and-excitation input gate."""
from .features import (SENTINEL, WINDOW, FeatureNorm, apply_sentinel, estimator_forward, infer_mask,
                       stack_magnitudes, window_starts)
from .layers import se_backward, se_forward
from .network import EstimatorParams, NetConfig, backward, forward, init_params, mse_loss
from .train import TrainConfig, TrainResult, train

__all__ = [
    "SENTINEL", "WINDOW", "FeatureNorm", "apply_sentinel", "estimator_forward", "infer_mask",
    "stack_magnitudes", "window_starts", "se_forward", "se_backward", "EstimatorParams", "NetConfig",
    "backward", "forward", "init_params", "mse_loss", "TrainConfig", "TrainResult", "train",
]
