"""Layered ``key=value`` run configuration.

Precedence, lowest to highest: built-in defaults, ``--config FILE``, command
flags.  Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .optics import NoiseParams, OpticalConfig


class ConfigError(ValueError):
    pass


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def _csv_floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(v).split(","))


def _bool(v) -> bool:
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


# key -> (parser, default)
KEYS = {
    "scene_h": (int, 32), "scene_w": (int, 32), "channels": (int, 1),
    "sensor_h": (int, 40), "sensor_w": (int, 40),
    "depths_cm": (_csv_floats, (29.0, 32.0, 35.0, 38.0, 41.0)), "ref_depth_cm": (float, 35.0),
    "blur_sigma0": (float, 1.0), "blobs_per_column": (int, 3), "blob_width_range": (_csv_floats, (1.5, 3.0)),
    "optics_seed": (int, 42), "identity_mode": (_bool, False),
    "noise": (_bool, True), "read_sigma": (float, 0.002), "shot_sigma": (float, 0.01),
    "net_h": (int, 32), "net_w": (int, 32),
    "n_classes": (int, 10), "test_fraction": (float, 1.0 / 11.0),
    "square_px": (int, 2), "field_px": (int, 24),
    "epochs": (int, 30), "batch_size": (int, 16), "lr": (float, 1e-3), "shuffle": (_bool, True),
    "lambda": (float, 1e-3), "max_cg_iters": (int, 500), "cg_tol": (float, 1e-8),
    "seed": (int, 1), "workers": (int, 1),
    "scene_cm": (float, 6.5), "fov_scene_cm": (float, 21.0), "distance_cm": (float, 35.0),
    "ssim_threshold": (float, 0.6),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def layered(cls, file=None, overrides: dict | None = None) -> "RunConfig":
        vals = {k: d for k, (_, d) in KEYS.items()}
        layers = []
        if file is not None:
            layers.append(read_kv(file))
        if overrides:
            layers.append({k: v for k, v in overrides.items() if v is not None})
        for layer in layers:
            for k, v in layer.items():
                if k not in KEYS:
                    raise ConfigError(f"unknown configuration key {k!r}")
                parser = KEYS[k][0]
                try:
                    vals[k] = parser(v) if isinstance(v, str) else v
                except ValueError as exc:
                    raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
        return cls(vals)

    def __getitem__(self, k):
        return self.values[k]

    def optical(self) -> OpticalConfig:
        v = self.values
        return OpticalConfig(
            scene_h=v["scene_h"], scene_w=v["scene_w"], channels=v["channels"],
            sensor_h=v["sensor_h"], sensor_w=v["sensor_w"], depths_cm=v["depths_cm"],
            ref_depth_cm=v["ref_depth_cm"], blur_sigma0=v["blur_sigma0"],
            blobs_per_column=v["blobs_per_column"], blob_width_range=v["blob_width_range"],
            seed=v["optics_seed"], identity_mode=v["identity_mode"],
        )

    def noise(self) -> NoiseParams:
        v = self.values
        return NoiseParams(v["read_sigma"], v["shot_sigma"], v["noise"])

    def echo(self) -> dict[str, str]:
        out = {}
        for k, v in self.values.items():
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            out[k] = v
        return out
