from .checkpoint import load_checkpoint, save_checkpoint
from .layers import BatchNorm, causal_linear_forward, causal_mask
from .network import CausalMixerNet, ModelConfig, allocate_embedding_dims, loss_mse, loss_mse_grad
from .training import (
    Adam,
    TrainReport,
    evaluate_loss,
    fit,
    input_gradient_map,
    reconstruct_series,
    reconstruct_windows,
    window_losses,
)

__all__ = [
    "Adam",
    "BatchNorm",
    "CausalMixerNet",
    "ModelConfig",
    "TrainReport",
    "allocate_embedding_dims",
    "causal_linear_forward",
    "causal_mask",
    "evaluate_loss",
    "fit",
    "input_gradient_map",
    "load_checkpoint",
    "loss_mse",
    "loss_mse_grad",
    "reconstruct_series",
    "reconstruct_windows",
    "save_checkpoint",
    "window_losses",
]
