"""Minimal NumPy neural-network engine with manual backpropagation."""

from .engine import NonFiniteError, ShapeError, precision, set_precision
from .layers import loss_bce_pixelwise, loss_softmax_ce
from .network import (
    AdamState,
    LayerSpec,
    MissingWeightError,
    NetworkSpec,
    WeightStore,
    adam_step,
    backward_pass,
    forward_pass,
    init_weights,
    load_weights,
    loss_and_grad,
    validate_weights,
    weights_from_bytes,
)

__all__ = [
    "AdamState", "LayerSpec", "MissingWeightError", "NetworkSpec", "NonFiniteError", "ShapeError",
    "WeightStore", "adam_step", "backward_pass", "forward_pass", "init_weights", "load_weights",
    "loss_and_grad", "loss_bce_pixelwise", "loss_softmax_ce", "precision", "set_precision",
    "validate_weights", "weights_from_bytes",
]
