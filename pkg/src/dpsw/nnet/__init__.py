"""Minimal network substrate: autodiff, MLPs, MMD, Adam, checkpoints."""

from .adam import Adam, AdamState, adam_step
from .autodiff import GradientTape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import MLP, init_params, mlp_forward, weight_penalty, weight_penalty_np
from .mmd import median_bandwidth, mmd_rbf, mmd_rbf_t

__all__ = [
    "MLP",
    "Adam",
    "AdamState",
    "GradientTape",
    "Tensor",
    "adam_step",
    "backward",
    "init_params",
    "load_checkpoint",
    "median_bandwidth",
    "mlp_forward",
    "mmd_rbf",
    "mmd_rbf_t",
    "save_checkpoint",
    "weight_penalty",
    "weight_penalty_np",
]
