"""Simulated cannula camera: depth-dependent linear transfer operators.

The camera is modelled as ``A_d = M @ P_d``.  ``P_d`` is the geometric stage
(scale about the grid center by ``ref/d`` and Gaussian blur of width
``sigma0 * d / ref``), ``M`` scrambles every facet pixel into a few Gaussian
blobs on the sensor, identically for all depths and channels.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive_seed, splitmix64

TOP1_MAGIC = b"TOP1"
_TOP1_HEADER = struct.Struct("<4sIIIQQ")


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class OpticalConfig:
    scene_h: int = 32
    scene_w: int = 32
    channels: int = 1
    sensor_h: int = 40
    sensor_w: int = 40
    depths_cm: tuple[float, ...] = (29.0, 32.0, 35.0, 38.0, 41.0)
    ref_depth_cm: float = 35.0
    blur_sigma0: float = 1.0
    blobs_per_column: int = 3
    blob_width_range: tuple[float, float] = (1.5, 3.0)
    seed: int = 42
    identity_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths_cm", tuple(float(d) for d in self.depths_cm))
        object.__setattr__(self, "blob_width_range", tuple(float(w) for w in self.blob_width_range))
        for name in ("scene_h", "scene_w", "sensor_h", "sensor_w"):
            v = getattr(self, name)
            if not 4 <= v <= 256:
                raise ValueError(f"{name}={v} outside [4, 256]")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        d = self.depths_cm
        if not d or any(x <= 0 for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"depths_cm must be positive and strictly increasing: {d}")
        if float(self.ref_depth_cm) not in d:
            raise ValueError(f"ref_depth_cm={self.ref_depth_cm} is not one of {d}")
        lo, hi = self.blob_width_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad blob_width_range {self.blob_width_range}")
        if self.blobs_per_column < 1:
            raise ValueError("blobs_per_column must be >= 1")
        if self.blur_sigma0 <= 0:
            raise ValueError("blur_sigma0 must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def ref_index(self) -> int:
        return self.depths_cm.index(float(self.ref_depth_cm))

    @property
    def scene_shape(self) -> tuple[int, int]:
        return (self.scene_h, self.scene_w)

    @property
    def sensor_shape(self) -> tuple[int, int]:
        return (self.sensor_h, self.sensor_w)

    def digest(self) -> int:
        """64-bit content hash of the configuration."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")

    def replace(self, **changes) -> "OpticalConfig":
        return OpticalConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class NoiseParams:
    read_sigma: float = 0.002
    shot_sigma: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        if self.read_sigma < 0 or self.shot_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")


NOISE_OFF = NoiseParams(enabled=False)


@dataclass(frozen=True, eq=False)
class TransferOperator:
    matrix: np.ndarray
    depth_index: int
    seed: int
    config_digest: int
    scene_shape: tuple[int, int] = field(default=(0, 0))
    sensor_shape: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        rows, cols = self.matrix.shape
        if self.scene_shape == (0, 0):
            side = math.isqrt(cols)
            object.__setattr__(self, "scene_shape", (side, cols // side))
        if self.sensor_shape == (0, 0):
            side = math.isqrt(rows)
            object.__setattr__(self, "sensor_shape", (side, rows // side))
        if self.scene_shape[0] * self.scene_shape[1] != cols:
            raise ValueError("scene_shape inconsistent with matrix columns")
        if self.sensor_shape[0] * self.sensor_shape[1] != rows:
            raise ValueError("sensor_shape inconsistent with matrix rows")
        self.matrix.setflags(write=False)

    def to_bytes(self) -> bytes:
        rows, cols = self.matrix.shape
        head = _TOP1_HEADER.pack(TOP1_MAGIC, rows, cols, self.depth_index, self.seed, self.config_digest)
        return head + np.ascontiguousarray(self.matrix, dtype="<f4").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def load_operator(path, scene_shape=None, sensor_shape=None) -> TransferOperator:
    """Read a TOP1 file.  Shapes default to square grids when not given."""
    buf = Path(path).read_bytes()
    return operator_from_bytes(buf, scene_shape, sensor_shape)


def operator_from_bytes(buf: bytes, scene_shape=None, sensor_shape=None) -> TransferOperator:
    if len(buf) < 4 or buf[:4] != TOP1_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {TOP1_MAGIC!r}", 0)
    if len(buf) < _TOP1_HEADER.size:
        raise FormatError("truncated TOP1 header", len(buf))
    _, rows, cols, depth_index, seed, digest = _TOP1_HEADER.unpack_from(buf)
    need = _TOP1_HEADER.size + 4 * rows * cols
    if len(buf) != need:
        raise FormatError(f"payload length {len(buf)} bytes, expected {need}", _TOP1_HEADER.size)
    matrix = np.frombuffer(buf, dtype="<f4", offset=_TOP1_HEADER.size).reshape(rows, cols).astype(np.float64)
    return TransferOperator(
        matrix, depth_index, seed, digest,
        scene_shape=tuple(scene_shape) if scene_shape else (0, 0),
        sensor_shape=tuple(sensor_shape) if sensor_shape else (0, 0),
    )


def _gauss_lattice(offsets: np.ndarray, sigma: float) -> np.ndarray:
    # normalised so that the weights over all integer offsets sum to 1
    reach = int(math.ceil(50 * sigma)) + 1
    z = np.exp(-(np.arange(-reach, reach + 1) ** 2) / (2 * sigma**2)).sum()
    return np.exp(-(offsets**2) / (2 * sigma**2)) / z


def geometric_stage_1d(n: int, magnification: float, sigma: float) -> np.ndarray:
    """1-D factor of the scale+blur stage, an ``n x n`` column-substochastic matrix.

    Source pixel ``j`` lands at ``c + m (j - c)`` and is split over its two
    neighbouring lattice sites with tent (bilinear) weights; each site then
    spreads with a lattice-normalised Gaussian.  Intensity leaving the grid is
    lost, so column sums are at most 1 and strictly positive.
    """
    c = (n - 1) / 2.0
    pos = c + magnification * (np.arange(n) - c)
    lo = np.floor(pos)
    frac = pos - lo
    rows = np.arange(n)[:, None]
    R = (1.0 - frac) * _gauss_lattice(rows - lo, sigma) + frac * _gauss_lattice(rows - lo - 1.0, sigma)
    sums = R.sum(axis=0)
    over = sums > 1.0
    R[:, over] /= sums[over]
    return R


def geometric_stage(config: OpticalConfig, depth_index: int) -> np.ndarray:
    d = config.depths_cm[depth_index]
    m = config.ref_depth_cm / d
    sigma = config.blur_sigma0 * d / config.ref_depth_cm
    Ry = geometric_stage_1d(config.scene_h, m, sigma)
    Rx = geometric_stage_1d(config.scene_w, m, sigma)
    return np.kron(Ry, Rx)


def mixing_matrix(config: OpticalConfig) -> np.ndarray:
    """Depth-independent mode-mixing stage, columns normalised to sum 1."""
    sh, sw = config.sensor_shape
    n_facets = config.scene_h * config.scene_w
    yy, xx = np.mgrid[0:sh, 0:sw]
    yy = yy.ravel().astype(np.float64)
    xx = xx.ravel().astype(np.float64)
    w_lo, w_hi = config.blob_width_range
    M = np.zeros((sh * sw, n_facets))
    for k in range(n_facets):
        g = SplitMix64(derive_seed(config.seed, k))
        col = np.zeros(sh * sw)
        for _ in range(config.blobs_per_column):
            cy = g.uniform(0.0, sh)
            cx = g.uniform(0.0, sw)
            width = g.uniform(w_lo, w_hi)
            amp = g.uniform(0.5, 1.0)
            col += amp * np.exp(-((yy - cy + 0.5) ** 2 + (xx - cx + 0.5) ** 2) / (2 * width**2))
        M[:, k] = col / col.sum()
    return M


_MIX_CACHE: dict[int, np.ndarray] = {}


def build_operator(config: OpticalConfig, depth_index: int) -> TransferOperator:
    if not 0 <= depth_index < len(config.depths_cm):
        raise IndexError(f"depth_index {depth_index} not in [0, {len(config.depths_cm)})")
    digest = config.digest()
    if config.identity_mode:
        if config.scene_shape != config.sensor_shape:
            raise ValueError(
                f"identity_mode needs scene dims {config.scene_shape} == sensor dims {config.sensor_shape}"
            )
        A = np.eye(config.scene_h * config.scene_w)
    else:
        if digest not in _MIX_CACHE:
            _MIX_CACHE[digest] = mixing_matrix(config)
        A = _MIX_CACHE[digest] @ geometric_stage(config, depth_index)
    return TransferOperator(
        A, depth_index, config.seed, digest,
        scene_shape=config.scene_shape, sensor_shape=config.sensor_shape,
    )


def forward(op: TransferOperator, scene: np.ndarray) -> np.ndarray:
    """Analog sensor image for a ``(C, H, W)`` or ``(H, W)`` scene."""
    scene = np.asarray(scene, dtype=np.float64)
    squeeze = scene.ndim == 2
    if squeeze:
        scene = scene[None]
    if scene.shape[1:] != tuple(op.scene_shape):
        raise ValueError(f"scene dims {scene.shape[1:]} do not match operator {op.scene_shape}")
    flat = scene.reshape(scene.shape[0], -1)
    out = (op.matrix @ flat.T).T.reshape(scene.shape[0], *op.sensor_shape)
    return out[0] if squeeze else out


def forward_batch(op: TransferOperator, scenes: np.ndarray) -> np.ndarray:
    """Apply ``op`` to a stack ``(N, C, H, W)`` of scenes."""
    scenes = np.asarray(scenes, dtype=np.float64)
    n, c = scenes.shape[:2]
    if scenes.shape[2:] != tuple(op.scene_shape):
        raise ValueError(f"scene dims {scenes.shape[2:]} do not match operator {op.scene_shape}")
    out = scenes.reshape(n * c, -1) @ op.matrix.T
    return out.reshape(n, c, *op.sensor_shape)


def quantize(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and snap to k/255 with round-half-away-from-zero."""
    v = np.clip(values, 0.0, 1.0) * 255.0
    return np.floor(v + 0.5) / 255.0


def sense(analog: np.ndarray, noise: NoiseParams, rng_seed: int) -> np.ndarray:
    analog = np.asarray(analog, dtype=np.float64)
    v = analog
    if noise.enabled:
        g = SplitMix64(splitmix64(rng_seed))
        z = g.normal_array(2 * v.size)
        read = z[: v.size].reshape(v.shape)
        shot = z[v.size :].reshape(v.shape)
        v = v + noise.read_sigma * read + noise.shot_sigma * np.sqrt(np.clip(v, 0.0, None)) * shot
    return quantize(v)


def downsample_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the last two axes."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dims must be positive")
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[-2:]
    if out_h > in_h or out_w > in_w:
        raise ValueError(f"output {out_h}x{out_w} larger than input {in_h}x{in_w}")
    Wy = _bilinear_weights(in_h, out_h)
    Wx = _bilinear_weights(in_w, out_w)
    out = np.einsum("ij,...jk,lk->...il", Wy, img, Wx)
    return np.clip(out, 0.0, 1.0)


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    W = np.zeros((n_out, n_in))
    W[np.arange(n_out), lo] += 1.0 - frac
    W[np.arange(n_out), hi] += frac
    return W


def angular_extent_deg(size_cm: float, distance_cm: float) -> float:
    """Full angle subtended by an object of ``size_cm`` at ``distance_cm``."""
    if size_cm <= 0 or distance_cm <= 0:
        raise ValueError("size and distance must be positive")
    return math.degrees(2.0 * math.atan((size_cm / 2.0) / distance_cm))
