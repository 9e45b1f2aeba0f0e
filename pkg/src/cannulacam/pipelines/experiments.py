"""Desk-scale experiment procedures built on datasets, networks and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import metrics
from ..datagen import LoadedDataset, ManifestRow
from ..nn.engine import dtype
from ..nn.network import WeightStore, validate_weights
from ..optics import angular_extent_deg, downsample_bilinear
from ..rng import SplitMix64, named_seed
from .nets import build_classifier_net, build_depth_net, build_recon_net
from .report import ExperimentReport
from .training import TrainConfig, TrainResult, predict, train_network

PAPER_REFERENCE = {
    "recon_color_glyphs": {"ssim": 0.77, "mae": 0.05},
    "depth_accuracy": {"gray": 0.9996, "color": 0.9988},
    "resolution_squares": {"ssim": 0.91, "mae": 0.01, "angle_deg": 0.4},
    "fov_deg": 18.0,
}


class SplitGuardError(RuntimeError):
    """An evaluation was asked to score TRAIN samples."""


def guard_test(rows: list[ManifestRow]) -> None:
    bad = [r.id for r in rows if r.split != "TEST"]
    if bad:
        raise SplitGuardError(f"{len(bad)} TRAIN samples passed to evaluation (first id {bad[0]})")


def net_inputs(sensors: np.ndarray, net_hw: tuple[int, int]) -> np.ndarray:
    """Downsample ``(N, C, H, W)`` sensor images to the network grid."""
    sensors = np.asarray(sensors, dtype=np.float64)
    if sensors.shape[-2:] != tuple(net_hw):
        sensors = downsample_bilinear(sensors, *net_hw)
    return sensors.astype(dtype())


def _per_channel(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n * c, 1, h, w)


# -- reconstruction ----------------------------------------------------------------

def train_recon(scenes: np.ndarray, sensors: np.ndarray, cfg: TrainConfig,
                on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train the single-channel U-net; color channels become independent samples."""
    if len(scenes) == 0:
        raise ValueError("empty training set")
    if scenes.shape[1] != sensors.shape[1]:
        raise ValueError(f"mixed-channel dataset: scenes {scenes.shape[1]} vs sensors {sensors.shape[1]}")
    h, w = scenes.shape[-2:]
    spec = build_recon_net(1, h, w)
    x = _per_channel(net_inputs(sensors, (h, w)))
    t = _per_channel(np.asarray(scenes, dtype=dtype()))
    return train_network(spec, x, t, cfg, on_epoch)


def reconstruct(weights: WeightStore, sensors: np.ndarray, scene_hw: tuple[int, int]) -> np.ndarray:
    spec = build_recon_net(1, *scene_hw)
    validate_weights(spec, weights)
    n, c = sensors.shape[:2]
    x = _per_channel(net_inputs(sensors, scene_hw))
    out = predict(spec, weights, x)
    return out.reshape(n, c, *scene_hw).astype(np.float64)


def eval_recon(weights: WeightStore, data: LoadedDataset, rows: list[ManifestRow],
               baseline: np.ndarray | None = None) -> ExperimentReport:
    """Per-image SSIM/MAE on TEST rows, optionally against a fixed baseline image."""
    guard_test(rows)
    scenes, sensors = data.arrays(rows)
    preds = reconstruct(weights, sensors, data.config.scene_shape)
    rep = ExperimentReport()
    wins = 0
    for r, gt, pr in zip(rows, scenes, preds):
        s = metrics.ssim(pr, gt)
        rep.add(r.id, "ssim", s)
        rep.add(r.id, "mae", metrics.mae(pr, gt))
        if baseline is not None:
            sb = metrics.ssim(baseline, gt)
            rep.add(r.id, "baseline_ssim", sb)
            wins += s > sb
    rep.finalize()
    if baseline is not None and rows:
        rep.aggregates["beats_baseline_fraction"] = wins / len(rows)
    rep.aggregates["n"] = len(rows)
    rep.provenance.update({
        "config_digest": f"{data.config.digest():016x}", "weight_digest": weights.digest(),
        "dataset_digest": data.digest(),
    })
    return rep


def mean_train_image(data: LoadedDataset) -> np.ndarray:
    scenes, _ = data.arrays(data.manifest.select("TRAIN"))
    return scenes.mean(axis=0)


@dataclass
class DofResult:
    depths_cm: list[float]
    mean_ssim: list[float]
    mean_mae: list[float]
    report: ExperimentReport = field(default_factory=ExperimentReport)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.mean_ssim))


def dof_sweep(weights: WeightStore, per_depth: dict[int, tuple[LoadedDataset, list[ManifestRow]]]) -> DofResult:
    """Evaluate one reconstructor on the same scenes recorded at every depth."""
    populations = {d: sorted(r.scene_path for r in rows) for d, (_, rows) in per_depth.items()}
    ref = next(iter(populations.values()))
    if any(p != ref for p in populations.values()):
        raise ValueError("depth manifests do not share one scene population")
    depths = sorted(per_depth)
    out = DofResult([], [], [])
    for d in depths:
        data, rows = per_depth[d]
        rep = eval_recon(weights, data, rows)
        out.depths_cm.append(data.config.depths_cm[d])
        out.mean_ssim.append(rep.mean_of("ssim"))
        out.mean_mae.append(rep.mean_of("mae"))
        for sid, m, v in rep.rows:
            out.report.add(sid, m, v)
        out.report.aggregates[f"depth{d}_cm"] = data.config.depths_cm[d]
        out.report.aggregates[f"depth{d}_mean_ssim"] = out.mean_ssim[-1]
        out.report.aggregates[f"depth{d}_mean_mae"] = out.mean_mae[-1]
    out.report.aggregates["argmax_depth_index"] = depths[out.argmax]
    out.report.aggregates["argmax_depth_cm"] = out.depths_cm[out.argmax]
    out.report.provenance["weight_digest"] = weights.digest()
    return out


def split_by_depth(data: LoadedDataset, split: str = "TEST") -> dict[int, tuple[LoadedDataset, list[ManifestRow]]]:
    out: dict[int, list[ManifestRow]] = {}
    for r in data.manifest.select(split):
        if r.depth_index is None:
            raise ValueError(f"sample {r.id} has no depth label")
        out.setdefault(r.depth_index, []).append(r)
    return {d: (data, rows) for d, rows in sorted(out.items())}


# -- classification (depth and content) ------------------------------------------

@dataclass
class ClassifierRun:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    train: TrainResult


def _fit_and_score(spec, x_tr, y_tr, x_te, y_te, cfg, k, on_epoch=None) -> ClassifierRun:
    res = train_network(spec, x_tr, y_tr, cfg, on_epoch)
    logits = predict(spec, res.weights, x_te)
    pred = logits.argmax(axis=1)
    return ClassifierRun(metrics.accuracy(pred, y_te), metrics.confusion(pred, y_te, k), pred, np.asarray(y_te), res)


def depth_arrays(data: LoadedDataset, rows: list[ManifestRow], net_hw):
    if any(r.depth_index is None for r in rows):
        raise ValueError("depth classification needs depth_index on every sample")
    _, sensors = data.arrays(rows)
    return net_inputs(sensors, net_hw), np.array([r.depth_index for r in rows])


def train_eval_depth(data: LoadedDataset, cfg: TrainConfig, net_hw=(32, 32), shuffled_labels: bool = False,
                     on_epoch=None) -> ClassifierRun:
    """Depth classifier on raw sensor images; ``shuffled_labels`` is the chance control."""
    train_rows = data.manifest.select("TRAIN")
    test_rows = data.manifest.select("TEST")
    guard_test(test_rows)
    x_tr, y_tr = depth_arrays(data, train_rows, net_hw)
    x_te, y_te = depth_arrays(data, test_rows, net_hw)
    if shuffled_labels:
        y_tr = y_tr[SplitMix64(named_seed(cfg.seed, "split")).permutation(len(y_tr))]
    k = len(data.config.depths_cm)
    spec = build_depth_net(*net_hw, k, channels=x_tr.shape[1])
    return _fit_and_score(spec, x_tr, y_tr, x_te, y_te, cfg, k, on_epoch)


def classify_inputs(data: LoadedDataset, rows, domain: str, net_hw, recon_weights: WeightStore | None):
    _, sensors = data.arrays(rows)
    if domain == "RAW":
        return net_inputs(sensors, net_hw)
    if domain == "RECON":
        if recon_weights is None:
            raise ValueError("RECON domain needs reconstruction weights")
        recon = reconstruct(recon_weights, sensors, data.config.scene_shape)
        if recon.shape[-2:] != tuple(net_hw):
            recon = downsample_bilinear(recon, *net_hw)
        return recon.astype(dtype())
    raise ValueError(f"unknown domain {domain!r}")


def train_eval_classify(data: LoadedDataset, domain: str, cfg: TrainConfig, net_hw=(32, 32),
                        recon_weights: WeightStore | None = None, on_epoch=None) -> ClassifierRun:
    if domain == "RECON" and recon_weights is None:
        raise ValueError("RECON domain needs reconstruction weights")
    train_rows = data.manifest.select("TRAIN")
    test_rows = data.manifest.select("TEST")
    guard_test(test_rows)
    if any(r.label is None for r in train_rows + test_rows):
        raise ValueError("classification needs a label on every sample")
    x_tr = classify_inputs(data, train_rows, domain, net_hw, recon_weights)
    x_te = classify_inputs(data, test_rows, domain, net_hw, recon_weights)
    y_tr = np.array([r.label for r in train_rows])
    y_te = np.array([r.label for r in test_rows])
    k = data.manifest.n_classes
    spec = build_classifier_net(*net_hw, k, channels=x_tr.shape[1])
    return _fit_and_score(spec, x_tr, y_tr, x_te, y_te, cfg, k, on_epoch)


def classifier_report(run: ClassifierRun, rows: list[ManifestRow], prefix: str = "") -> ExperimentReport:
    rep = ExperimentReport()
    for r, p, t in zip(rows, run.predictions, run.labels):
        rep.add(r.id, f"{prefix}correct", float(p == t))
    rep.finalize()
    rep.aggregates[f"{prefix}accuracy"] = run.accuracy
    k = run.confusion.shape[0]
    for i in range(k):
        for j in range(k):
            rep.aggregates[f"{prefix}confusion_{i}_{j}"] = int(run.confusion[i, j])
    return rep


# -- resolution and field of view --------------------------------------------------

@dataclass
class ResolutionResult:
    sizes_px: list[int]
    mean_ssim: list[float]
    mean_mae: list[float]
    smallest_px: int | None
    angle_deg: float | None

    @property
    def status(self) -> str:
        return "resolved" if self.smallest_px is not None else "unresolved at tested sizes"


def resolution_experiment(weights: WeightStore, by_size: dict[int, tuple[LoadedDataset, list[ManifestRow]]],
                          scene_cm: float = 6.5, distance_cm: float = 35.0,
                          threshold: float = 0.6) -> ResolutionResult:
    sizes = sorted(by_size)
    ssims, maes = [], []
    for size in sizes:
        data, rows = by_size[size]
        rep = eval_recon(weights, data, rows)
        ssims.append(rep.mean_of("ssim"))
        maes.append(rep.mean_of("mae"))
    passing = [s for s, v in zip(sizes, ssims) if v >= threshold]
    if not passing:
        return ResolutionResult(sizes, ssims, maes, None, None)
    smallest = min(passing)
    data = by_size[smallest][0]
    size_cm = smallest * scene_cm / data.config.scene_w
    return ResolutionResult(sizes, ssims, maes, smallest, angular_extent_deg(size_cm, distance_cm))


def local_window(img: np.ndarray, center, size: int = 11) -> np.ndarray:
    """``size x size`` patch around ``center`` (row, col), shifted to stay inside."""
    h, w = img.shape[-2:]
    r0 = int(round(center[0])) - size // 2
    c0 = int(round(center[1])) - size // 2
    r0 = min(max(r0, 0), h - size)
    c0 = min(max(c0, 0), w - size)
    return img[..., r0:r0 + size, c0:c0 + size]


@dataclass
class FovResult:
    bin_edges_px: list[float]
    bin_ssim: list[float | None]
    bin_counts: list[int]
    radius_px: float | None
    radius_cm: float | None
    fov_deg: float | None


def fov_experiment(weights: WeightStore, data: LoadedDataset, rows: list[ManifestRow], field_cm: float = 21.0,
                   distance_cm: float = 35.0, bin_px: float = 2.0, threshold: float = 0.6) -> FovResult:
    """Local SSIM around each square versus the square's distance from the axis."""
    guard_test(rows)
    if data.centers is None:
        raise ValueError("FOV experiment needs square centers (aux.csv)")
    scenes, sensors = data.arrays(rows)
    preds = reconstruct(weights, sensors, data.config.scene_shape)
    h, w = data.config.scene_shape
    c = ((h - 1) / 2.0, (w - 1) / 2.0)
    max_r = math.hypot(*c)
    n_bins = int(math.ceil(max_r / bin_px))
    edges = [i * bin_px for i in range(n_bins + 1)]
    per_bin: list[list[float]] = [[] for _ in range(n_bins)]
    for r, gt, pr in zip(rows, scenes, preds):
        cy, cx = data.center_of(r)
        rad = math.hypot(cy - c[0], cx - c[1])
        b = min(int(rad // bin_px), n_bins - 1)
        per_bin[b].append(metrics.ssim(local_window(pr, (cy, cx)), local_window(gt, (cy, cx))))
    bin_ssim = [float(np.mean(v)) if v else None for v in per_bin]
    radius_px = None
    for b, v in enumerate(bin_ssim):
        if v is not None and v >= threshold:
            radius_px = edges[b + 1]
    if radius_px is None:
        return FovResult(edges, bin_ssim, [len(v) for v in per_bin], None, None, None)
    radius_cm = radius_px * field_cm / w
    return FovResult(edges, bin_ssim, [len(v) for v in per_bin], radius_px, radius_cm,
                     angular_extent_deg(2 * radius_cm, distance_cm))
