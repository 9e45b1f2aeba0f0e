"""8-bit binary PGM (P5) / PPM (P6) images as float arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Write ``(H, W)``, ``(1, H, W)`` or ``(3, H, W)`` data as P5/P6."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        h, w = img.shape
        head = f"P5\n{w} {h}\n255\n".encode()
        body = to_u8(img).tobytes()
    elif img.ndim == 3 and img.shape[0] == 3:
        _, h, w = img.shape
        head = f"P6\n{w} {h}\n255\n".encode()
        body = to_u8(img).transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"cannot store image of shape {img.shape}")
    Path(path).write_bytes(head + body)


def _tokens(buf: bytes, count: int):
    pos = 0
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace byte after maxval


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file; returns ``(1, H, W)`` or ``(3, H, W)`` floats."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if magic == b"P5":
        c = 1
    elif magic == b"P6":
        c = 3
    else:
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    need = w * h * c
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos) if len(buf) - pos >= need else None
    if data is None:
        raise ValueError(f"{path}: expected {need} pixel bytes, found {len(buf) - pos}")
    img = data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0
    return img
