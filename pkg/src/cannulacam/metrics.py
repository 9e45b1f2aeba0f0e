"""Image-quality and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")

    def kernel(self) -> np.ndarray:
        x = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        g /= g.sum()
        return g


DEFAULT_SSIM = SsimParams()


def mae(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, params: SsimParams = DEFAULT_SSIM) -> float:
    """Mean SSIM over all fully interior Gaussian-window positions.

    Inputs are ``(H, W)`` or ``(C, H, W)``; color SSIM is the plain mean of
    the per-channel values.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], params) for c in range(a.shape[0])]))
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {a.shape}")
    if min(a.shape) < params.window:
        raise ValueError(f"image {a.shape} smaller than the {params.window}x{params.window} window")
    if np.array_equal(a, b):
        return 1.0
    g = params.kernel()
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    t = np.asarray(labels)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape} predictions vs {t.shape} labels")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))


def confusion(predictions, labels, k: int) -> np.ndarray:
    """``k x k`` counts; row = true class, column = predicted class."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape} predictions vs {t.shape} labels")
    if p.size == 0:
        raise ValueError("confusion of an empty set is undefined")
    if t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k:
        raise ValueError(f"class index outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm
