"""A small reverse-mode autodiff engine with just enough layers for the actors.

Everything runs in float64. A forward pass records a tape of closures on the
produced tensors; :func:`backward` walks it once in reverse topological order
and releases it, so a second call without a fresh forward pass is an error.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_STD_MIN = -10.0
LOG_STD_MAX = 4.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._released = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: a._accumulate(-g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: a._accumulate(g * out))


def square(a: Tensor) -> Tensor:
    return _node(a.value ** 2, (a,), lambda g: a._accumulate(2.0 * g * a.value))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.value.sum(axis=axis)

    def bw(g):
        g = np.asarray(g)
        if axis is not None:
            axes = (axis,) if np.isscalar(axis) else axis
            for ax in sorted(ax % a.value.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            if p.requires_grad:
                p._accumulate(gp)

    return _node(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: a._accumulate(g * mask))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: a._accumulate(g * mask))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense input width {x.shape[-1]} != weight rows {weight.shape[0]}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.value.T)
        if weight.requires_grad:
            weight._accumulate(x.value.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _node(x.value @ weight.value + bias.value, (x, weight, bias), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 same-padded cross-correlation; ``weight`` is (C_out, C_in, kh, kw), kh, kw odd."""
    if x.value.ndim != 4:
        raise ValueError(f"conv2d expects (batch, channels, rows, cols), got {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d input has {x.shape[1]} channels, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same padding needs odd kernel sizes")
    ph, pw = kh // 2, kw // 2
    pad = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    win = sliding_window_view(np.pad(x.value, pad), (kh, kw), axis=(2, 3))
    out = np.tensordot(win, weight.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.value[None, :, None, None]

    def bw(g):
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gwin = sliding_window_view(np.pad(g, pad), (kh, kw), axis=(2, 3))
            flipped = weight.value[:, :, ::-1, ::-1]
            dx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
            x._accumulate(dx)

    return _node(np.ascontiguousarray(out), (x, weight, bias), bw)


def gaussian_log_prob(action, mu: Tensor, log_std: Tensor) -> Tensor:
    """Per-row log-density of a fixed ``action`` under N(mu, exp(log_std)^2), log_std clamped."""
    a = np.asarray(action.value if isinstance(action, Tensor) else action, dtype=np.float64)
    if a.shape != mu.shape or mu.shape != log_std.shape:
        raise ValueError(f"shape mismatch: action {a.shape}, mu {mu.shape}, log_std {log_std.shape}")
    ls = np.clip(log_std.value, LOG_STD_MIN, LOG_STD_MAX)
    mask = (log_std.value >= LOG_STD_MIN) & (log_std.value <= LOG_STD_MAX)
    z = (a - mu.value) * np.exp(-ls)
    axes = tuple(range(1, a.ndim))
    out = np.sum(-ls - HALF_LOG_2PI - 0.5 * z * z, axis=axes)

    def bw(g):
        g = np.asarray(g).reshape(g.shape + (1,) * len(axes))
        if mu.requires_grad:
            mu._accumulate(g * z * np.exp(-ls))
        if log_std.requires_grad:
            log_std._accumulate(g * (z * z - 1.0) * mask)

    return _node(out, (mu, log_std), bw)


def gaussian_sample(mu: Tensor, log_std: Tensor, rng: Optional[np.random.Generator],
                    eps: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Reparameterised draw ``mu + exp(log_std) * eps`` and its per-row log-density.

    ``rng=None`` with ``eps=None`` uses eps = 0 (the mean action).
    """
    if mu.shape != log_std.shape:
        raise ValueError(f"mu shape {mu.shape} != log_std shape {log_std.shape}")
    if eps is None:
        eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    ls = clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
    action = add(mu, mul(exp(ls), eps))
    axes = tuple(range(1, mu.value.ndim))
    const = -(HALF_LOG_2PI + 0.5 * eps * eps)
    logp = tsum(add(neg(ls), const), axis=axes)
    return action, logp


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``."""
    if loss._released:
        raise RuntimeError("backward() called twice on the same graph; run a new forward pass")
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None
            node._released = True
    loss._released = True


def init_gaussian(shape, rng: np.random.Generator, std: float) -> np.ndarray:
    if std == 0:
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


@dataclass
class LayerParams:
    weight: Tensor
    bias: Tensor
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for key, t in self.named_tensors():
            self.m.setdefault(key, np.zeros_like(t.value))
            self.v.setdefault(key, np.zeros_like(t.value))

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def zero_grad(self):
        self.weight.zero_grad()
        self.bias.zero_grad()

    @property
    def size(self) -> int:
        return self.weight.value.size + self.bias.value.size


def adam_step(params: LayerParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update from the gradients currently held on the tensors."""
    params.step += 1
    t = params.step
    for key, tensor in params.named_tensors():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value)
        m = params.m[key]
        v = params.v[key]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        tensor.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.params = LayerParams(
            Tensor(init_gaussian((n_in, n_out), rng, 1.0 / math.sqrt(n_in)), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.params.weight, self.params.bias)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: Tuple[int, int], rng: np.random.Generator):
        kh, kw = kernel
        fan_in = c_in * kh * kw
        self.params = LayerParams(
            Tensor(init_gaussian((c_out, c_in, kh, kw), rng, 1.0 / math.sqrt(fan_in)), requires_grad=True),
            Tensor(np.zeros(c_out), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params.weight, self.params.bias)


# Checkpoint container:
#   8 bytes  magic b"APSBCKPT"
#   4 bytes  format version, uint32 little-endian
#   8 bytes  header length n, uint64 little-endian
#   n bytes  UTF-8 JSON header (sorted keys): {"manifest": {...},
#            "steps": {layer: int}, "tensors": [{"name", "shape", "offset", "nbytes"}]}
#   payload  float64 little-endian C-order arrays at the listed offsets
CKPT_MAGIC = b"APSBCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, layers: Dict[str, LayerParams], manifest: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for lname in sorted(layers):
        lp = layers[lname]
        for key, t in lp.named_tensors():
            for kind, arr in (("", t.value), ("adam_m/", lp.m[key]), ("adam_v/", lp.v[key])):
                data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                entries.append({"name": f"{kind}{lname}/{key}", "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(data)})
                blobs.append(data)
                offset += len(data)
    header = json.dumps({"manifest": manifest or {}, "steps": {n: layers[n].step for n in sorted(layers)},
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` where arrays are keyed by tensor name."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n].decode("utf-8"))
    base = 20 + n
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"]).copy()
    return header, arrays


def restore_layers(layers: Dict[str, LayerParams], header: dict, arrays: Dict[str, np.ndarray]) -> None:
    for lname, lp in layers.items():
        for key, t in lp.named_tensors():
            name = f"{lname}/{key}"
            if name not in arrays:
                raise KeyError(f"checkpoint has no tensor {name}")
            if arrays[name].shape != t.value.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.value.shape}")
            t.value = arrays[name].copy()
            lp.m[key] = arrays[f"adam_m/{name}"].copy()
            lp.v[key] = arrays[f"adam_v/{name}"].copy()
        lp.step = int(header["steps"][lname])


def parameters(layers: Iterable[LayerParams]) -> List[Tensor]:
    return [t for lp in layers for _, t in lp.named_tensors()]
