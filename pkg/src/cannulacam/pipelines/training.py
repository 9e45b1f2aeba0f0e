"""Mini-batch training loop shared by every experiment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..nn.engine import dtype
from ..nn.network import AdamState, NetworkSpec, WeightStore, adam_step, forward_pass, init_weights, loss_and_grad
from ..rng import SplitMix64, derive_seed, named_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 1
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs batch statistics)")


@dataclass
class TrainResult:
    weights: WeightStore
    epoch_losses: list[float] = field(default_factory=list)


def epoch_order(n: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Sample order for one epoch; identical for every run sharing ``cfg.seed``."""
    if not cfg.shuffle:
        return np.arange(n)
    return SplitMix64(derive_seed(named_seed(cfg.seed, "shuffle"), epoch)).permutation(n)


def batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # a trailing single sample cannot be batch-normalised
            yield idx


def train_network(spec: NetworkSpec, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                  on_epoch: Callable[[int, float], None] | None = None,
                  weights: WeightStore | None = None) -> TrainResult:
    """Adam on the spec's loss.  ``targets`` are images (BCE) or class indices (CE)."""
    n = len(inputs)
    if n == 0:
        raise ValueError("empty training set")
    if n < 2:
        raise ValueError("need at least two training samples")
    w = init_weights(spec, named_seed(cfg.seed, "init")) if weights is None else weights.copy()
    state = AdamState(lr=cfg.lr)
    x_all = np.asarray(inputs, dtype=dtype())
    t_all = np.asarray(targets, dtype=dtype()) if spec.loss == "BCE_PIXELWISE" else np.asarray(targets)
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        count = 0
        for idx in batches(epoch_order(n, cfg, epoch), cfg.batch_size):
            loss, grads = loss_and_grad(spec, w, x_all[idx], t_all[idx])
            trainable = {k: w[k] for k in grads}
            adam_step(trainable, grads, state)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.info("epoch %d loss %.6f", epoch + 1, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, losses[-1])
    return TrainResult(w, losses)


def predict(spec: NetworkSpec, weights: WeightStore, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode outputs for ``inputs`` in fixed-size chunks."""
    outs = []
    for start in range(0, len(inputs), batch_size):
        out, _ = forward_pass(spec, weights, inputs[start:start + batch_size], "infer")
        outs.append(out)
    if not outs:
        return np.zeros((0,) + tuple(spec.output_shape), dtype=dtype())
    return np.concatenate(outs)
