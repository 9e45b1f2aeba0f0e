"""Procedural glyph stimuli: fixed stroke skeletons rendered with affine jitter.

Each class is a set of polylines over a 7x7 control grid.  Points are written
as two digits ``rc`` (row, column), strokes are separated by ``|``.  The table
is versioned: changing any entry changes every dataset generated from it.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import SplitMix64, derive_seed

TEMPLATE_VERSION = 1

# digits, upper case, then the 11 lower-case classes kept by EMNIST "balanced"
_TEMPLATES = [
    ("0", "01 05 16 56 65 61 50 10 01|51 15"),
    ("1", "12 03 63|60 66"),
    ("2", "11 00 06 16 26 60 66"),
    ("3", "00 06 16 26 33 46 56 66 60|31 33"),
    ("4", "04 40 46|15 65"),
    ("5", "06 00 30 35 46 56 65 60"),
    ("6", "05 01 10 50 61 65 56 46 35 30"),
    ("7", "00 06 33 63|31 35"),
    ("8", "01 05 16 25 31 40 50 61 65 56 45 31 20 10 01"),
    ("9", "36 31 20 10 01 05 16 56 65 60"),
    ("A", "60 03 66|41 45"),
    ("B", "60 00 05 16 25 30|30 35 46 56 65 60"),
    ("C", "16 05 01 10 50 61 65 56"),
    ("D", "00 60 64 55 15 04 00"),
    ("E", "06 00 60 66|30 34"),
    ("F", "06 00 60|30 34"),
    ("G", "16 05 01 10 50 61 65 56 36 33"),
    ("H", "00 60|06 66|30 36"),
    ("I", "02 04|03 63|62 64"),
    ("J", "03 06|05 55 64 61 50"),
    ("K", "00 60|06 30 66"),
    ("L", "00 60 66"),
    ("M", "60 00 33 06 66"),
    ("N", "60 00 66 06"),
    ("O", "02 04 16 46 64 62 40 10 02"),
    ("P", "60 00 05 16 26 35 30"),
    ("Q", "02 04 16 46 64 62 40 10 02|44 66"),
    ("R", "60 00 05 16 26 35 30|33 66"),
    ("S", "16 05 01 10 20 31 35 46 56 65 61 50"),
    ("T", "00 06|03 63"),
    ("U", "00 50 61 65 56 06"),
    ("V", "00 63 06"),
    ("W", "00 62 33 64 06"),
    ("X", "00 66|06 60"),
    ("Y", "00 33 06|33 63"),
    ("Z", "00 06 60 66"),
    ("a", "22 25 36 66|36 31 40 51 62 65 56"),
    ("b", "00 60 65 56 36 25 20"),
    ("d", "06 66 61 50 30 21 26"),
    ("e", "41 46 35 24 22 31 51 62 65"),
    ("f", "05 04 13 63|31 35"),
    ("g", "25 21 30 41 45 25|25 55 64 61 50"),
    ("h", "00 60|30 25 35 46 66"),
    ("n", "20 60|31 24 35 46 66"),
    ("q", "26 21 30 41 46|26 66"),
    ("r", "20 60|41 23 26"),
    ("t", "03 53 64 65|21 25"),
]

CLASS_NAMES = [name for name, _ in _TEMPLATES]
N_TEMPLATES = len(_TEMPLATES)


def _parse(spec: str) -> list[np.ndarray]:
    strokes = []
    for part in spec.split("|"):
        pts = [(int(tok[0]), int(tok[1])) for tok in part.split()]
        strokes.append(np.array(pts, dtype=np.float64))
    return strokes


STROKES = [_parse(spec) for _, spec in _TEMPLATES]


def _segment_distance(py, px, a, b):
    d = b - a
    L2 = float(d @ d)
    if L2 == 0.0:
        return np.hypot(py - a[0], px - a[1])
    t = np.clip(((py - a[0]) * d[0] + (px - a[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(py - (a[0] + t * d[0]), px - (a[1] + t * d[1]))


def render_glyph(label: int, dims: int, rotation_deg: float = 0.0, scale: float = 1.0,
                 shift: tuple[float, float] = (0.0, 0.0), thickness: float = 1.5) -> np.ndarray:
    """Rasterise one glyph into a ``dims x dims`` image in [0, 1]."""
    c = (dims - 1) / 2.0
    span = 0.6 * dims
    theta = math.radians(rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    py, px = np.mgrid[0:dims, 0:dims].astype(np.float64)
    dist = np.full((dims, dims), np.inf)
    for stroke in STROKES[label]:
        pts = (stroke - 3.0) / 6.0 * span * scale
        pts = pts @ rot.T + np.array([c + shift[0], c + shift[1]])
        if len(pts) == 1:
            dist = np.minimum(dist, _segment_distance(py, px, pts[0], pts[0]))
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(py, px, a, b))
    # anti-aliased edge: full intensity within half the thickness, 1 px ramp
    return np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)


def gen_glyphs(n: int, n_classes: int, dims: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` jittered glyph scenes ``(n, 1, dims, dims)`` and their labels."""
    if n_classes > N_TEMPLATES or n_classes < 1:
        raise ValueError(f"n_classes={n_classes} outside [1, {N_TEMPLATES}]")
    if dims < 16:
        raise ValueError(f"dims={dims} must be >= 16")
    if n < 0:
        raise ValueError("n must be >= 0")
    scenes = np.zeros((n, 1, dims, dims))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        g = SplitMix64(derive_seed(seed, i))
        label = g.below(n_classes)
        rot = g.uniform(-15.0, 15.0)
        scale = g.uniform(0.8, 1.2)
        shift = (g.uniform(-0.1, 0.1) * dims, g.uniform(-0.1, 0.1) * dims)
        thick = g.uniform(1.0, 2.0)
        labels[i] = label
        scenes[i, 0] = render_glyph(label, dims, rot, scale, shift, thick)
    return scenes, labels
