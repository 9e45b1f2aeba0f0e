"""Engine-wide numeric settings and the non-finite fault."""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    def __init__(self, layer_index: int, layer_name: str, where: str = "forward"):
        super().__init__(f"non-finite values in {where} output of layer {layer_index} ({layer_name})")
        self.layer_index = layer_index
        self.layer_name = layer_name


class ShapeError(ValueError):
    def __init__(self, message: str, layer_index: int | None = None):
        prefix = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(prefix + message)
        self.layer_index = layer_index


def dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    """Switch storage/compute between 32-bit (default) and 64-bit floats."""
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    _DTYPE = np.float64 if bits == 64 else np.float32


@contextlib.contextmanager
def precision(bits: int):
    old = 64 if _DTYPE == np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_DTYPE)
