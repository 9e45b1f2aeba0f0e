"""Layer primitives with explicit forward and backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Arrays are NCHW.
"""

from __future__ import annotations

import numpy as np

from .engine import ShapeError, asarray, dtype


# -- convolution ---------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """Columns of 3x3 neighbourhoods, shape (9*C, N*H*W), rows ordered (ky, kx, channel)."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((9, c, n, h, w), dtype=x.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[k] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(9 * c, n * h * w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 cross-correlation with 'same' zero padding (1x1 or 3x3)."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"unsupported kernel {kh}x{kw}")
    cols = x.transpose(1, 0, 2, 3).reshape(c, -1) if kh == 1 else _im2col3(x)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    y = wmat @ cols + b[:, None]
    y = y.reshape(o, n, h, wd).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), (cols, x.shape, w)


def conv2d_backward(dy: np.ndarray, cache):
    cols, xshape, w = cache
    n, c, h, wd = xshape
    o, _, k, _ = w.shape
    dy2 = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (dy2 @ cols.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    db = dy2.sum(axis=1)
    if k == 1:
        dx = (w.reshape(o, c).T @ dy2).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    else:
        # full correlation with the flipped, channel-swapped kernel
        w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv2d_forward(dy, np.ascontiguousarray(w_flip), np.zeros(c, dtype=dy.dtype))
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


# -- batch normalisation -------------------------------------------------------

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def batchnorm_forward(x, gain, shift, running_mean, running_var, train: bool):
    """Per-channel normalisation over (N, H, W).

    In train mode the running statistics are updated in place with
    ``running = 0.9 * running + 0.1 * batch`` (biased batch variance).
    """
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm needs a batch of at least 2 in train mode")
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mu
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mu, var = running_mean, running_var
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * gain.reshape(shape) + shift.reshape(shape)
    return y.astype(x.dtype, copy=False), (xhat, inv_std, gain)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gain = cache
    axes = (0, 2, 3) if dy.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if dy.ndim == 4 else (1, -1)
    m = dy.size // dy.shape[1]
    dgain = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * gain.reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx.astype(dy.dtype, copy=False), dgain, dshift


# -- pointwise and reshaping ops ----------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    # subgradient at exactly 0 is 0
    return dy * mask


def sigmoid_forward(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def maxpool2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum in row-major window order
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy, cache):
    idx, (n, c, h, w) = cache
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    dx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return dx


def upsample2_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def upsample2_backward(dy, _cache=None):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_forward(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dy, split):
    return dy[:, :split], dy[:, split:]


def gavgpool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def gavgpool_backward(dy, xshape):
    n, c, h, w = xshape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), xshape).astype(dy.dtype)


def dense_forward(x, w, b):
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects width {w.shape[0]}, got {x2.shape[1]}")
    return x2 @ w + b, (x2, x.shape, w)


def dense_backward(dy, cache):
    x2, xshape, w = cache
    return (dy @ w.T).reshape(xshape), x2.T @ dy, dy.sum(axis=0)


# -- losses ---------------------------------------------------------------------

PRED_EPS = 1e-7


def loss_bce_pixelwise(logits: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy behind a sigmoid.

    Returns ``(loss, p, grad)`` where ``grad`` is taken with respect to the
    pre-sigmoid logits in the fused form ``(p - t) / N``.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"prediction {logits.shape} and target {target.shape} differ")
    p, _ = sigmoid_forward(logits)
    pc = np.clip(p, PRED_EPS, 1 - PRED_EPS)
    t = target
    loss = float(-np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc)))
    grad = (p - t) / p.size
    return loss, p, grad.astype(logits.dtype, copy=False)


def bce_from_probs(p: np.ndarray, t: np.ndarray) -> float:
    pc = np.clip(p, PRED_EPS, 1 - PRED_EPS)
    return float(-np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_softmax_ce(logits: np.ndarray, labels):
    """Mean softmax cross-entropy over a batch ``(N, K)``; gradient ``(softmax - onehot) / N``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} logit rows but {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype, copy=False)


def zeros(shape):
    return np.zeros(shape, dtype=dtype())


__all__ = [name for name in dir() if name.endswith(("_forward", "_backward")) or name.startswith("loss_")]
__all__ += ["softmax", "bce_from_probs", "asarray", "zeros"]
