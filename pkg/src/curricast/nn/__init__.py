"""Small float64 numeric core: layers with explicit backward passes, Adam, RNG."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    ShapeError,
    dense_backward,
    dense_forward,
    dilated_conv1d_backward,
    dilated_conv1d_forward,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_gates,
    lstm_gates_backward,
    mae_loss,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .optim import AdamState, TrainingError, adam_step, clip_by_global_norm, glorot_uniform, global_norm
from .rng import XorShift64Star

__all__ = [
    "AdamState", "CheckpointError", "ShapeError", "TrainingError", "XorShift64Star",
    "adam_step", "clip_by_global_norm", "dense_backward", "dense_forward",
    "dilated_conv1d_backward", "dilated_conv1d_forward", "glorot_uniform", "global_norm",
    "load_checkpoint", "lstm_cell_backward", "lstm_cell_forward", "lstm_gates", "lstm_gates_backward", "mae_loss",
    "relu_backward", "relu_forward", "save_checkpoint", "sigmoid",
]
