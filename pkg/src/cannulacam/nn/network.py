"""Layered networks: specs, weight stores, execution and the NNW1 file format."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..rng import SplitMix64
from . import layers as L
from .engine import NonFiniteError, ShapeError, dtype

KINDS = ("CONV2D", "BATCHNORM", "RELU", "MAXPOOL2", "UPSAMPLE2", "CONCAT", "SIGMOID", "DENSE", "GAVGPOOL")
TRAINABLE = ("CONV2D", "BATCHNORM", "DENSE")

NNW1_MAGIC = b"NNW1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "CONV2D":
            return {"weight": (self.out_ch, self.in_ch, self.kernel, self.kernel), "bias": (self.out_ch,)}
        if self.kind == "DENSE":
            return {"weight": (self.in_ch, self.out_ch), "bias": (self.out_ch,)}
        if self.kind == "BATCHNORM":
            c = (self.in_ch,)
            return {"gain": c, "shift": c, "running_mean": c, "running_var": c}
        return {}


def conv(name, cin, cout, k=3):
    return LayerSpec("CONV2D", name, cin, cout, k)


def bn(name, c):
    return LayerSpec("BATCHNORM", name, c, c)


def op(kind, name):
    return LayerSpec(kind, name)


def dense(name, nin, nout):
    return LayerSpec("DENSE", name, nin, nout)


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    skips: dict[int, int] = field(default_factory=dict)  # source layer index -> CONCAT layer index
    loss: str = "BCE_PIXELWISE"

    def __post_init__(self):
        if self.loss not in ("BCE_PIXELWISE", "SOFTMAX_CE"):
            raise ValueError(f"unknown loss {self.loss}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self._concat_source = {}
        for src, dst in self.skips.items():
            if not 0 <= src < dst < len(self.layers):
                raise ShapeError(f"skip source {src} must precede target {dst}", dst)
            if self.layers[dst].kind != "CONCAT":
                raise ShapeError(f"skip target is {self.layers[dst].kind}, not CONCAT", dst)
            self._concat_source[dst] = src
        for i, l in enumerate(self.layers):
            if l.kind == "CONCAT" and i not in self._concat_source:
                raise ShapeError("CONCAT layer without a skip source", i)
        self.shapes = self.shape_check()

    def shape_check(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) of every layer; raises ShapeError."""
        shapes = []
        cur: tuple[int, ...] = tuple(self.input_shape)
        for i, l in enumerate(self.layers):
            k = l.kind
            if k == "CONV2D":
                if len(cur) != 3 or cur[0] != l.in_ch:
                    raise ShapeError(f"{l.name} expects {l.in_ch} channels, gets {cur}", i)
                cur = (l.out_ch, cur[1], cur[2])
            elif k == "BATCHNORM":
                if cur[0] != l.in_ch:
                    raise ShapeError(f"{l.name} expects {l.in_ch} channels, gets {cur}", i)
            elif k == "MAXPOOL2":
                if len(cur) != 3 or cur[1] % 2 or cur[2] % 2:
                    raise ShapeError(f"{l.name} needs even spatial dims, gets {cur}", i)
                cur = (cur[0], cur[1] // 2, cur[2] // 2)
            elif k == "UPSAMPLE2":
                cur = (cur[0], cur[1] * 2, cur[2] * 2)
            elif k == "CONCAT":
                other = shapes[self._concat_source[i]]
                if other[1:] != cur[1:]:
                    raise ShapeError(f"{l.name} spatial mismatch {cur} vs {other}", i)
                cur = (cur[0] + other[0],) + cur[1:]
            elif k == "GAVGPOOL":
                cur = (cur[0],)
            elif k == "DENSE":
                if math.prod(cur) != l.in_ch:
                    raise ShapeError(f"{l.name} expects width {l.in_ch}, gets {cur}", i)
                cur = (l.out_ch,)
            shapes.append(cur)
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_count(self, trainable_only: bool = True) -> int:
        total = 0
        for l in self.layers:
            for pname, shape in l.param_shapes().items():
                if trainable_only and pname.startswith("running"):
                    continue
                total += math.prod(shape)
        return total


class WeightStore(dict):
    """Flat mapping ``"<layer>.<param>" -> ndarray`` in network order."""

    def trainable(self):
        return {k: v for k, v in self.items() if not k.split(".")[-1].startswith("running")}

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.items()})

    def astype(self, dt) -> "WeightStore":
        return WeightStore({k: v.astype(dt) for k, v in self.items()})

    def to_bytes(self) -> bytes:
        out = [NNW1_MAGIC, struct.pack("<I", len(self))]
        for name, arr in self.items():
            raw = name.encode("ascii")
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    def digest(self) -> str:
        return hashlib.blake2b(self.to_bytes(), digest_size=8).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def weights_from_bytes(buf: bytes, spec: NetworkSpec | None = None) -> WeightStore:
    from ..optics import FormatError

    if buf[:4] != NNW1_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {NNW1_MAGIC!r}", 0)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated NNW1 file: need {n} bytes", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    store = WeightStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("ascii")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(dims)
        store[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(dtype())
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    if spec is not None:
        validate_weights(spec, store)
    return store


def load_weights(path, spec: NetworkSpec | None = None) -> WeightStore:
    return weights_from_bytes(Path(path).read_bytes(), spec)


class MissingWeightError(KeyError):
    pass


def expected_params(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    out = {}
    for l in spec.layers:
        for pname, shape in l.param_shapes().items():
            out[f"{l.name}.{pname}"] = shape
    return out


def validate_weights(spec: NetworkSpec, store: WeightStore) -> None:
    expected = expected_params(spec)
    missing = [k for k in expected if k not in store]
    if missing:
        raise MissingWeightError(f"missing weight tensors: {', '.join(missing)}")
    extra = [k for k in store if k not in expected]
    if extra:
        raise MissingWeightError(f"unexpected weight tensors: {', '.join(extra)}")
    for k, shape in expected.items():
        if tuple(store[k].shape) != shape:
            raise ShapeError(f"{k} has shape {store[k].shape}, expected {shape}")


def init_weights(spec: NetworkSpec, seed: int) -> WeightStore:
    """He-normal weights, zero biases, identity batchnorm."""
    g = SplitMix64(seed)
    store = WeightStore()
    dt = dtype()
    for l in spec.layers:
        shapes = l.param_shapes()
        if l.kind in ("CONV2D", "DENSE"):
            wshape = shapes["weight"]
            fan_in = l.in_ch * l.kernel * l.kernel if l.kind == "CONV2D" else l.in_ch
            std = math.sqrt(2.0 / fan_in)
            store[f"{l.name}.weight"] = (g.normal_array(math.prod(wshape)) * std).reshape(wshape).astype(dt)
            store[f"{l.name}.bias"] = np.zeros(shapes["bias"], dtype=dt)
        elif l.kind == "BATCHNORM":
            c = shapes["gain"]
            store[f"{l.name}.gain"] = np.ones(c, dtype=dt)
            store[f"{l.name}.shift"] = np.zeros(c, dtype=dt)
            store[f"{l.name}.running_mean"] = np.zeros(c, dtype=dt)
            store[f"{l.name}.running_var"] = np.ones(c, dtype=dt)
    return store


def forward_pass(spec: NetworkSpec, weights: WeightStore, batch: np.ndarray, mode: str = "infer",
                 stop: int | None = None):
    """Run the network on ``batch``.

    Returns ``(output, caches)``; ``caches`` is ``None`` in infer mode.  With
    ``stop`` the pass ends before layer ``stop`` (used to get logits in front
    of a final sigmoid).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode}")
    train = mode == "train"
    x = np.asarray(batch, dtype=dtype())
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"input {x.shape[1:]} does not match spec {spec.input_shape}", 0)
    n_layers = len(spec.layers) if stop is None else stop
    keep = set(spec.skips)
    saved = {}
    caches = [] if train else None
    for i in range(n_layers):
        l = spec.layers[i]
        k = l.kind
        cache = None
        if k == "CONV2D":
            x, cache = L.conv2d_forward(x, weights[f"{l.name}.weight"], weights[f"{l.name}.bias"])
        elif k == "BATCHNORM":
            x, cache = L.batchnorm_forward(
                x, weights[f"{l.name}.gain"], weights[f"{l.name}.shift"],
                weights[f"{l.name}.running_mean"], weights[f"{l.name}.running_var"], train)
        elif k == "RELU":
            x, cache = L.relu_forward(x)
        elif k == "SIGMOID":
            x, cache = L.sigmoid_forward(x)
        elif k == "MAXPOOL2":
            x, cache = L.maxpool2_forward(x)
        elif k == "UPSAMPLE2":
            x, cache = L.upsample2_forward(x)
        elif k == "CONCAT":
            x, cache = L.concat_forward(x, saved[spec._concat_source[i]])
        elif k == "GAVGPOOL":
            x, cache = L.gavgpool_forward(x)
        elif k == "DENSE":
            x, cache = L.dense_forward(x, weights[f"{l.name}.weight"], weights[f"{l.name}.bias"])
        if not np.isfinite(x).all():
            raise NonFiniteError(i, l.name)
        if i in keep:
            saved[i] = x
        if train:
            caches.append(cache)
    return x, caches


def backward_pass(spec: NetworkSpec, caches: list, grad_out: np.ndarray) -> WeightStore:
    """Gradients of every trainable tensor, given d(loss)/d(output of last cached layer)."""
    grads = WeightStore()
    skip_grads: dict[int, np.ndarray] = {}
    g = grad_out
    for i in range(len(caches) - 1, -1, -1):
        l = spec.layers[i]
        k = l.kind
        cache = caches[i]
        if i in skip_grads:
            g = g + skip_grads.pop(i)
        if k == "CONV2D":
            g, dw, db = L.conv2d_backward(g, cache)
            grads[f"{l.name}.weight"] = dw
            grads[f"{l.name}.bias"] = db
        elif k == "BATCHNORM":
            g, dgain, dshift = L.batchnorm_backward(g, cache)
            grads[f"{l.name}.gain"] = dgain
            grads[f"{l.name}.shift"] = dshift
        elif k == "RELU":
            g = L.relu_backward(g, cache)
        elif k == "SIGMOID":
            g = L.sigmoid_backward(g, cache)
        elif k == "MAXPOOL2":
            g = L.maxpool2_backward(g, cache)
        elif k == "UPSAMPLE2":
            g = L.upsample2_backward(g)
        elif k == "CONCAT":
            g, g_skip = L.concat_backward(g, cache)
            skip_grads[spec._concat_source[i]] = g_skip
        elif k == "GAVGPOOL":
            g = L.gavgpool_backward(g, cache)
        elif k == "DENSE":
            g, dw, db = L.dense_backward(g, cache)
            grads[f"{l.name}.weight"] = dw
            grads[f"{l.name}.bias"] = db
        if not np.isfinite(g).all():
            raise NonFiniteError(i, l.name, "backward")
    # reorder to network order
    return WeightStore({k: grads[k] for k in expected_params(spec) if k in grads})


def loss_and_grad(spec: NetworkSpec, weights: WeightStore, batch, target):
    """One training-mode pass: ``(loss, grads)``.

    For ``BCE_PIXELWISE`` specs ending in SIGMOID the gradient enters at the
    logits (fused form); for ``SOFTMAX_CE`` the last layer emits logits.
    """
    if spec.loss == "BCE_PIXELWISE":
        stop = len(spec.layers) - 1 if spec.layers[-1].kind == "SIGMOID" else None
        if stop is None:
            raise ShapeError("BCE_PIXELWISE networks must end with SIGMOID", len(spec.layers) - 1)
        logits, caches = forward_pass(spec, weights, batch, "train", stop=stop)
        loss, _, g = L.loss_bce_pixelwise(logits, np.asarray(target, dtype=logits.dtype))
    else:
        logits, caches = forward_pass(spec, weights, batch, "train")
        loss, g = L.loss_softmax_ce(logits, target)
    return loss, backward_pass(spec, caches, g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """In-place Adam update with bias correction; increments ``state.t`` once."""
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
        if params[k].shape != g.shape:
            raise ShapeError(f"{k}: parameter {params[k].shape} vs gradient {g.shape}")
        if k in state.m and state.m[k].shape != g.shape:
            raise ShapeError(f"{k}: moment shape {state.m[k].shape} vs gradient {g.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        p = params[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.lr != 0.0:
            p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
