"""Scene datasets, rendering through the simulator, and train/test splits.

On disk a dataset is a directory holding ``manifest.csv``, ``dataset.cfg``
(key=value metadata including the optical configuration), optional
``aux.csv`` (square centers) and PGM/PPM images under ``scenes/`` and
``sensors/``.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .glyphs import gen_glyphs
from .optics import FormatError, NoiseParams, OpticalConfig, build_operator, forward, sense
from .rng import SplitMix64, splitmix64

__all__ = [
    "Sample", "DatasetManifest", "ManifestRow", "gen_glyphs", "colorize", "gen_squares", "load_idx",
    "load_idx_labels", "split", "render_dataset", "load_dataset", "FIXED", "ALL_DEPTHS", "make_scenes",
    "generate_dataset",
]

KINDS = ("GLYPHS", "SQUARES", "FOV_SQUARES", "IDX_IMPORT")
MANIFEST_HEADER = ["id", "scene_path", "sensor_path", "label", "depth_index", "split"]
ALL_DEPTHS = "ALL_DEPTHS"


def FIXED(depth_index: int) -> tuple[str, int]:
    return ("FIXED", depth_index)


def colorize(gray: np.ndarray, rng_seed: int) -> np.ndarray:
    """Tint a single-channel image with one random RGB triple in [0.25, 1]^3."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim == 3:
        if gray.shape[0] != 1:
            raise ValueError(f"colorize needs a single-channel image, got {gray.shape[0]} channels")
        gray = gray[0]
    g = SplitMix64(splitmix64(rng_seed))
    triple = np.array([g.uniform(0.25, 1.0) for _ in range(3)])
    return gray[None] * triple[:, None, None]


def gen_squares(n: int, square_px: int, field_px: int, dims: int, seed: int):
    """Scenes with one lit square each, plus the squares' center coordinates.

    Returns ``(scenes (n, 1, dims, dims), centers (n, 2))`` with centers as
    (row, col) in pixel coordinates.
    """
    if square_px < 1:
        raise ValueError("square_px must be >= 1")
    if field_px > dims:
        raise ValueError(f"field {field_px} larger than scene {dims}")
    if square_px > field_px:
        raise ValueError(f"square of {square_px} px does not fit in a {field_px} px field")
    f0 = (dims - field_px) // 2
    slots = field_px - square_px + 1
    scenes = np.zeros((n, 1, dims, dims))
    centers = np.zeros((n, 2))
    for i in range(n):
        g = SplitMix64(splitmix64(seed ^ i))
        r = f0 + g.below(slots)
        c = f0 + g.below(slots)
        scenes[i, 0, r:r + square_px, c:c + square_px] = 1.0
        centers[i] = (r + (square_px - 1) / 2.0, c + (square_px - 1) / 2.0)
    return scenes, centers


def load_idx(path) -> np.ndarray:
    """Parse an unsigned-byte, 3-dimensional IDX file into ``(n, h, w)`` floats."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"file too short for IDX magic ({len(buf)} bytes)", 0)
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic >> 8 != 0x08:
        raise FormatError(f"magic 0x{magic:08x} is not unsigned-byte IDX (0x000008xx)", 0)
    ndim = magic & 0xFF
    if ndim != 3:
        raise FormatError(f"expected 3 dimensions (magic 0x00000803), header declares {ndim}", 3)
    if len(buf) < 16:
        raise FormatError(f"truncated dimension header: {len(buf)} of 16 bytes", len(buf))
    n, h, w = struct.unpack_from(">III", buf, 4)
    need = n * h * w
    have = len(buf) - 16
    if have < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {have}", 16 + have)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=16)
    return data.reshape(n, h, w).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError("file too short for an IDX label header", len(buf))
    magic, n = struct.unpack_from(">II", buf, 0)
    if magic != 0x00000801:
        raise FormatError(f"label magic 0x{magic:08x}, expected 0x00000801", 0)
    if len(buf) - 8 < n:
        raise FormatError(f"truncated payload: expected {n} bytes, found {len(buf) - 8}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def fit_to_dims(images: np.ndarray, dims: int) -> np.ndarray:
    """Center-pad or center-crop ``(n, h, w)`` images to ``dims x dims``."""
    n, h, w = images.shape
    out = np.zeros((n, dims, dims))
    sh, sw = min(h, dims), min(w, dims)
    ih, iw = (h - sh) // 2, (w - sw) // 2
    oh, ow = (dims - sh) // 2, (dims - sw) // 2
    out[:, oh:oh + sh, ow:ow + sw] = images[:, ih:ih + sh, iw:iw + sw]
    return out


def split(n_total: int, n_test: int, seed: int) -> np.ndarray:
    """Boolean mask, True for the ``n_test`` ids drawn (Fisher-Yates) for testing."""
    if not 0 < n_test < n_total:
        raise ValueError(f"n_test={n_test} must satisfy 0 < n_test < n_total={n_total}")
    perm = SplitMix64(seed).permutation(n_total)
    mask = np.zeros(n_total, dtype=bool)
    mask[perm[:n_test]] = True
    return mask


@dataclass
class ManifestRow:
    id: int
    scene_path: str
    sensor_path: str
    label: int | None
    depth_index: int | None
    split: str


@dataclass
class DatasetManifest:
    kind: str
    n_total: int
    n_test: int
    n_classes: int
    seed: int
    config_digest: int
    rows: list[ManifestRow] = field(default_factory=list)
    config: OpticalConfig | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind}")

    def check(self) -> None:
        train = {r.id for r in self.rows if r.split == "TRAIN"}
        test = {r.id for r in self.rows if r.split == "TEST"}
        if train & test:
            raise ValueError("TRAIN and TEST ids overlap")
        if len(test) != self.n_test:
            raise ValueError(f"{len(test)} TEST rows, manifest declares {self.n_test}")

    def select(self, split: str | None = None, depth_index: int | None = None) -> list[ManifestRow]:
        return [r for r in self.rows
                if (split is None or r.split == split) and (depth_index is None or r.depth_index == depth_index)]


@dataclass
class Sample:
    id: int
    scene: np.ndarray
    sensor: np.ndarray
    label: int | None
    depth_index: int | None
    split: str


def _fmt(v) -> str:
    return "" if v is None else str(v)


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for r in rows:
            wr.writerow([r.id, r.scene_path, r.sensor_path, _fmt(r.label), _fmt(r.depth_index), r.split])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {header}")
        rows = []
        for rec in rd:
            rid, sp, sep, lab, dep, spl = rec
            if spl not in ("TRAIN", "TEST"):
                raise ValueError(f"{path}: bad split value {spl!r}")
            rows.append(ManifestRow(int(rid), sp, sep, int(lab) if lab else None, int(dep) if dep else None, spl))
    return rows


def render_dataset(scenes: np.ndarray, labels, config: OpticalConfig, depth_policy, noise: NoiseParams,
                   seed: int, out_dir=None, *, kind: str = "GLYPHS", n_test: int | None = None,
                   n_classes: int = 0, split_seed: int | None = None, centers=None,
                   workers: int = 1) -> DatasetManifest:
    """Render scenes through the simulator and (optionally) store them.

    Scenes are snapped to 8 bits first, as a display would.  Each sample's
    sensor noise uses the seed ``splitmix64(seed ^ id)``, so content does not
    depend on rendering order or ``workers``.  With ``ALL_DEPTHS`` every
    scene is replicated once per depth (id = scene * n_depths + depth) and the
    split is drawn over scenes so no scene straddles TRAIN and TEST.
    """
    scenes = np.asarray(scenes, dtype=np.float64)
    if scenes.ndim == 3:
        scenes = scenes[:, None]
    n_scenes = scenes.shape[0]
    if scenes.shape[2:] != config.scene_shape:
        raise ValueError(f"scene dims {scenes.shape[2:]} do not match config {config.scene_shape}")
    if scenes.shape[1] != config.channels:
        raise ValueError(f"{scenes.shape[1]}-channel scenes for a {config.channels}-channel config")
    if depth_policy == ALL_DEPTHS:
        depths = list(range(len(config.depths_cm)))
    else:
        tag, d = depth_policy
        if tag != "FIXED" or not 0 <= d < len(config.depths_cm):
            raise ValueError(f"bad depth policy {depth_policy!r}")
        depths = [d]
    ops = {d: build_operator(config, d) for d in depths}
    scenes = imageio.to_u8(scenes).astype(np.float64) / 255.0

    test_mask = np.zeros(n_scenes, dtype=bool)
    if n_test:
        test_mask = split(n_scenes, n_test, splitmix64(seed if split_seed is None else split_seed))

    jobs = [(s * len(depths) + j, s, d) for s in range(n_scenes) for j, d in enumerate(depths)]

    def render(job):
        sid, s, d = job
        return sense(forward(ops[d], scenes[s]), noise, splitmix64(seed ^ sid))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sensors = list(pool.map(render, jobs))
    else:
        sensors = [render(j) for j in jobs]

    rows = []
    for (sid, s, d), _ in zip(jobs, sensors):
        rows.append(ManifestRow(
            sid, f"scenes/{s:06d}.{_ext(config)}", f"sensors/{sid:06d}.{_ext(config)}",
            None if labels is None else int(labels[s]),
            d,
            "TEST" if test_mask[s] else "TRAIN",
        ))
    manifest = DatasetManifest(kind, len(rows), int(test_mask.sum()) * len(depths), n_classes, seed,
                               config.digest(), rows, config)
    manifest.check()
    manifest.extra["depth_policy"] = "all" if depth_policy == ALL_DEPTHS else f"fixed:{depths[0]}"
    manifest._scenes = scenes
    manifest._sensors = {sid: img for (sid, _, _), img in zip(jobs, sensors)}
    manifest._centers = None if centers is None else np.asarray(centers, dtype=np.float64)
    if out_dir is not None:
        save_dataset(manifest, out_dir)
    return manifest


def _ext(config: OpticalConfig) -> str:
    return "pgm" if config.channels == 1 else "ppm"


def save_dataset(manifest: DatasetManifest, out_dir) -> None:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "sensors").mkdir(parents=True, exist_ok=True)
    written = set()
    for r in manifest.rows:
        if r.scene_path not in written:
            s = int(Path(r.scene_path).stem)
            imageio.write_pnm(out / r.scene_path, manifest._scenes[s])
            written.add(r.scene_path)
        imageio.write_pnm(out / r.sensor_path, manifest._sensors[r.id])
    write_manifest(out / "manifest.csv", manifest.rows)
    if manifest._centers is not None:
        with open(out / "aux.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["scene", "center_row", "center_col"])
            for s, (cy, cx) in enumerate(manifest._centers):
                wr.writerow([s, repr(float(cy)), repr(float(cx))])
    from .config import write_kv

    meta = {
        "kind": manifest.kind, "n_total": manifest.n_total, "n_test": manifest.n_test,
        "n_classes": manifest.n_classes, "seed": manifest.seed, "config_digest": manifest.config_digest,
        **manifest.extra,
    }
    meta.update({f"optics.{k}": v for k, v in optical_items(manifest.config)})
    write_kv(out / "dataset.cfg", meta)


def optical_items(config: OpticalConfig):
    for k in OpticalConfig.__dataclass_fields__:
        v = getattr(config, k)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        yield k, v


def optical_from_items(items: dict) -> OpticalConfig:
    kwargs = {}
    for k, v in items.items():
        f = OpticalConfig.__dataclass_fields__.get(k)
        if f is None:
            raise KeyError(f"unknown optical key {k!r}")
        if k in ("depths_cm", "blob_width_range"):
            kwargs[k] = tuple(float(x) for x in str(v).split(","))
        elif k == "identity_mode":
            kwargs[k] = str(v).lower() in ("1", "true", "yes")
        elif k in ("ref_depth_cm", "blur_sigma0"):
            kwargs[k] = float(v)
        else:
            kwargs[k] = int(v)
    return OpticalConfig(**kwargs)


class LoadedDataset:
    """A dataset directory opened for reading; images load lazily and are cached."""

    def __init__(self, root):
        from .config import read_kv

        self.root = Path(root)
        meta = read_kv(self.root / "dataset.cfg")
        self.meta = meta
        self.config = optical_from_items({k[7:]: v for k, v in meta.items() if k.startswith("optics.")})
        self.manifest = DatasetManifest(
            meta["kind"], int(meta["n_total"]), int(meta["n_test"]), int(meta["n_classes"]),
            int(meta["seed"]), int(meta["config_digest"]), read_manifest(self.root / "manifest.csv"), self.config,
        )
        self.manifest.check()
        self.centers = None
        aux = self.root / "aux.csv"
        if aux.exists():
            with open(aux, newline="") as fh:
                rd = csv.reader(fh)
                next(rd)
                self.centers = {int(s): (float(r), float(c)) for s, r, c in rd}
        self._cache: dict[str, np.ndarray] = {}

    @property
    def rows(self) -> list[ManifestRow]:
        return self.manifest.rows

    def image(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = imageio.read_pnm(self.root / rel)
        return self._cache[rel]

    def sample(self, row: ManifestRow) -> Sample:
        return Sample(row.id, self.image(row.scene_path), self.image(row.sensor_path), row.label,
                      row.depth_index, row.split)

    def center_of(self, row: ManifestRow):
        if self.centers is None:
            return None
        return self.centers[int(Path(row.scene_path).stem)]

    def arrays(self, rows: list[ManifestRow]):
        scenes = np.stack([self.image(r.scene_path) for r in rows]) if rows else np.zeros((0,))
        sensors = np.stack([self.image(r.sensor_path) for r in rows]) if rows else np.zeros((0,))
        return scenes, sensors

    def digest(self) -> str:
        import hashlib

        h = hashlib.blake2b(digest_size=8)
        h.update((self.root / "manifest.csv").read_bytes())
        h.update((self.root / "dataset.cfg").read_bytes())
        return h.hexdigest()


def load_dataset(root) -> LoadedDataset:
    return LoadedDataset(root)


def make_scenes(kind: str, n: int, dims: int, seed: int, *, n_classes: int = 10, square_px: int = 2,
                field_px: int = 24, color: bool = False, idx_path=None, idx_labels_path=None):
    """Scenes, labels and square centers for one dataset kind.

    All content draws from named sub-streams of ``seed``; colorization uses
    its own stream so gray and color datasets share glyph shapes.
    """
    from .rng import derive_seed, named_seed

    centers = None
    labels = None
    if kind == "GLYPHS":
        scenes, labels = gen_glyphs(n, n_classes, dims, named_seed(seed, "dataset"))
    elif kind == "SQUARES":
        scenes, centers = gen_squares(n, square_px, field_px, dims, named_seed(seed, "dataset"))
    elif kind == "FOV_SQUARES":
        scenes, centers = gen_squares(n, square_px, dims, dims, named_seed(seed, "dataset"))
    elif kind == "IDX_IMPORT":
        if idx_path is None:
            raise ValueError("IDX import needs an image file")
        scenes = fit_to_dims(load_idx(idx_path), dims)[:n][:, None]
        if len(scenes) < n:
            raise ValueError(f"IDX file holds {len(scenes)} images, {n} requested")
        if idx_labels_path is not None:
            labels = load_idx_labels(idx_labels_path)[:n]
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if color:
        cs = named_seed(seed, "color")
        scenes = np.stack([colorize(s, derive_seed(cs, i)) for i, s in enumerate(scenes)])
    return scenes, labels, centers


def generate_dataset(kind: str, n: int, config: OpticalConfig, depth_policy, noise: NoiseParams, seed: int,
                     out_dir=None, *, test_fraction: float = 1.0 / 11.0, n_classes: int = 10,
                     square_px: int = 2, field_px: int = 24, idx_path=None, idx_labels_path=None,
                     workers: int = 1) -> DatasetManifest:
    """Generate ``n`` scenes of ``kind``, render them and (optionally) save."""
    from .rng import named_seed

    if config.scene_h != config.scene_w:
        raise ValueError("scene generators need a square scene grid")
    scenes, labels, centers = make_scenes(
        kind, n, config.scene_h, seed, n_classes=n_classes, square_px=square_px, field_px=field_px,
        color=config.channels == 3, idx_path=idx_path, idx_labels_path=idx_labels_path)
    n_test = int(round(n * test_fraction))
    m = render_dataset(scenes, labels, config, depth_policy, noise, named_seed(seed, "render"), None,
                       kind=kind, n_test=n_test, n_classes=n_classes if labels is not None else 0,
                       split_seed=named_seed(seed, "split"), centers=centers, workers=workers)
    if kind in ("SQUARES", "FOV_SQUARES"):
        m.extra["square_px"] = square_px
    if out_dir is not None:
        save_dataset(m, out_dir)
    return m
