"""Reverse-mode automatic differentiation on float32 numpy arrays.

Ops run eagerly and, when a Tape is active, append nodes holding a backward
closure. Nodes are appended in execution order, so the tape is topologically
sorted by construction and backward() is a single reverse sweep where every
node fires at most once. Storage and arithmetic are float32; explicit
reductions (sum / mean / broadcast-gradient folding) accumulate in float64
before casting back, which keeps summation order fixed and results
reproducible bit for bit within a process.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import conv3d as _c3d
from .errors import ConfigurationError, ContractViolation

Array = np.ndarray

# ---------------------------------------------------------------- tape ----

_TAPE: "Tape | None" = None


class Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op: str, out: "Tensor", parents: tuple, backward: Callable):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed primitives. Reusable read-only: backward()
    never mutates nodes, and calling it again recomputes the same gradients."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        global _TAPE
        if _TAPE is not None:
            raise ContractViolation("nested tapes are not supported")
        _TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _TAPE
        _TAPE = None

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != np.float32 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _record(op: str, out: Tensor, parents: tuple, backward: Callable) -> None:
    if _TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.nodes.append(Node(op, out, parents, backward))


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ContractViolation(
            f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
        )
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Fold a gradient back onto a broadcast operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(np.float32)
    return out.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep over the tape. Gradients land in the .grad slots of every
    tensor with requires_grad on the path to the loss."""
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.data.shape}")
    seen: set[int] = set()
    for node in tape.nodes:
        for t in (node.out, *node.parents):
            if id(t) not in seen:
                seen.add(id(t))
                t.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.out.grad is not None:
            node.backward(node.out.grad)


# ---------------------------------------------------------- primitives ----


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    _record("add", out, (a, b), bwd)
    return out


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    _record("sub", out, (a, b), bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    _record("mul", out, (a, b), bwd)
    return out


def div(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    _record("div", out, (a, b), bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record("neg", out, (a,), lambda g: _accum(a, -g))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(
            f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _record("matmul", out, (a, b), bwd)
    return out


def forward_dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x [B,I] @ W [I,O] + b [O]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ConfigurationError(
            f"dense: expected x[B,I], W[I,O], b[O], got {x.data.shape}, {W.data.shape}, {b.data.shape}"
        )
    if x.data.shape[1] != W.data.shape[0] or W.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(
            f"dense: mismatched shapes x{x.data.shape} W{W.data.shape} b{b.data.shape}"
        )
    out = Tensor(x.data @ W.data + b.data)

    def bwd(g):
        _accum(x, g @ W.data.T)
        _accum(W, x.data.T @ g)
        _accum(b, g.sum(axis=0, dtype=np.float64).astype(np.float32))

    _record("dense", out, (x, W, b), bwd)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        _accum(a, np.where(a.data > 0.0, g, 0.0).astype(np.float32))

    _record("relu", out, (a,), bwd)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))

    def bwd(g):
        _accum(a, g * (1.0 - out.data * out.data))

    _record("tanh", out, (a,), bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x))))

    def bwd(g):
        _accum(a, g * out.data * (1.0 - out.data))

    _record("sigmoid", out, (a,), bwd)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    _record("exp", out, (a,), lambda g: _accum(a, g * out.data))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    _record("log", out, (a,), lambda g: _accum(a, g / a.data))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    _record("square", out, (a,), lambda g: _accum(a, g * (2.0 * a.data)))
    return out


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root. The input must be strictly positive where a
    gradient is needed; callers add a small epsilon before the call."""
    root = np.sqrt(a.data)
    out = Tensor(root)
    _record("sqrt", out, (a,), lambda g: _accum(a, g * (0.5 / root)))
    return out


def minimum(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mask = a.data <= b.data
    out = Tensor(np.where(mask, a.data, b.data))

    def bwd(g):
        _accum(a, _unbroadcast(np.where(mask, g, 0.0).astype(np.float32), a.data.shape))
        _accum(b, _unbroadcast(np.where(mask, 0.0, g).astype(np.float32), b.data.shape))

    _record("minimum", out, (a, b), bwd)
    return out


def maximum(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mask = a.data >= b.data
    out = Tensor(np.where(mask, a.data, b.data))

    def bwd(g):
        _accum(a, _unbroadcast(np.where(mask, g, 0.0).astype(np.float32), a.data.shape))
        _accum(b, _unbroadcast(np.where(mask, 0.0, g).astype(np.float32), b.data.shape))

    _record("maximum", out, (a, b), bwd)
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(np.float32))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).astype(np.float32))

    _record("sum", out, (a,), bwd)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32))

    def bwd(g):
        if axis is None:
            _accum(a, (np.broadcast_to(g, a.data.shape) / n).astype(np.float32))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, (np.broadcast_to(gg, a.data.shape) / n).astype(np.float32))

    _record("mean", out, (a,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record("reshape", out, (a,), lambda g: _accum(a, g.reshape(a.data.shape)))
    return out


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, np.ascontiguousarray(g[tuple(idx)]))

    _record("concat", out, tuple(parts), bwd)
    return out


def crop(a: Tensor, slices: tuple) -> Tensor:
    """Slice with a tuple of slice objects; backward zero-embeds."""
    out = Tensor(np.ascontiguousarray(a.data[slices]))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[slices] = g
        _accum(a, full)

    _record("crop", out, (a,), bwd)
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]] for a [B,K]; used for categorical log-probs."""
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accum(a, full)

    _record("gather_rows", out, (a,), bwd)
    return out


def take_flat(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor: out[i] = a.ravel()[idx[i]].
    Backward scatter-adds, so repeated indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    out = Tensor(a.data.reshape(-1)[idx])

    def bwd(g):
        full = np.zeros(a.data.size, dtype=np.float32)
        np.add.at(full, idx, g)
        _accum(a, full.reshape(a.data.shape))

    _record("take_flat", out, (a,), bwd)
    return out


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbor x2 on the three trailing spatial axes of [B,C,D,H,W]."""
    x = a.data
    out = Tensor(x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4))

    def bwd(g):
        B, C, D, H, W = x.shape
        gg = g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7), dtype=np.float64)
        _accum(a, gg.astype(np.float32))

    _record("upsample2", out, (a,), bwd)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy from logits, numerically stable."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float32)
    out = Tensor(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def bwd(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        _accum(logits, (g * (s - t)).astype(np.float32))

    _record("bce_with_logits", out, (logits,), bwd)
    return out


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Stable log-sum-exp along an axis (shift by a detached max)."""
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(m))
    s = sum_(exp(shifted), axis=axis if axis >= 0 else a.data.ndim - 1, keepdims=keepdims)
    return add(log(s), Tensor(m if keepdims else m.squeeze(axis)))


def conv3d(x: Tensor, k: Tensor, bias: Tensor | None, stride: int, pad: int) -> Tensor:
    """Cross-correlation with 3x3x3 kernels; see conv3d.conv3d_forward."""
    out_data = _c3d.conv3d_forward(x.data, k.data, stride, pad)
    if bias is not None:
        out_data += bias.data[None, :, None, None, None]
    out = Tensor(out_data)

    def bwd(g):
        g_x, g_w = _c3d.conv3d_backward(x.data, k.data, g, stride, pad)
        _accum(x, g_x)
        _accum(k, g_w)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32))

    parents = (x, k) if bias is None else (x, k, bias)
    _record("conv3d", out, parents, bwd)
    return out


def conv_transpose3d(
    x: Tensor, k: Tensor, bias: Tensor | None, stride: int, pad: int, out_pad: int = 0
) -> Tensor:
    """Transposed convolution; adjoint of conv3d when out_pad = 0."""
    out_data = _c3d.convT3d_forward(x.data, k.data, stride, pad, out_pad)
    if bias is not None:
        out_data += bias.data[None, :, None, None, None]
    out = Tensor(out_data)

    def bwd(g):
        g_x, g_w = _c3d.convT3d_backward(x.data, k.data, g, stride, pad)
        _accum(x, g_x)
        _accum(k, g_w)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32))

    parents = (x, k) if bias is None else (x, k, bias)
    _record("conv_transpose3d", out, parents, bwd)
    return out


forward_conv3d = conv3d


# ------------------------------------------------------------- networks ----


@dataclass
class LayerSpec:
    """One layer of a NetSpec. kind: dense | conv3d | deconv3d | activation."""

    kind: str
    n_in: int = 0
    n_out: int = 0
    stride: int = 1
    pad: int = 1
    out_pad: int = 0
    fn: str = ""
    gain: float = 1.0


def dense(n_in: int, n_out: int, gain: float = 1.0) -> LayerSpec:
    return LayerSpec("dense", n_in=n_in, n_out=n_out, gain=gain)


def conv(c_in: int, c_out: int, stride: int = 1, pad: int = 1) -> LayerSpec:
    return LayerSpec("conv3d", n_in=c_in, n_out=c_out, stride=stride, pad=pad)


def deconv(c_in: int, c_out: int, stride: int = 2, pad: int = 1, out_pad: int = 1) -> LayerSpec:
    return LayerSpec("deconv3d", n_in=c_in, n_out=c_out, stride=stride, pad=pad, out_pad=out_pad)


def activation(fn: str) -> LayerSpec:
    return LayerSpec("activation", fn=fn)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def validate_netspec(spec: Sequence[LayerSpec]) -> None:
    """Consecutive layers must agree on widths/channels."""
    prev_out = None
    for i, layer in enumerate(spec):
        if layer.kind == "activation":
            if layer.fn not in _ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: unknown activation {layer.fn!r}")
            continue
        if layer.kind not in ("dense", "conv3d", "deconv3d"):
            raise ConfigurationError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.n_in <= 0 or layer.n_out <= 0:
            raise ConfigurationError(f"layer {i}: non-positive width")
        if prev_out is not None and layer.n_in != prev_out:
            raise ConfigurationError(
                f"layer {i}: expects {layer.n_in} inputs but previous layer emits {prev_out}"
            )
        prev_out = layer.n_out


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int, gain: float) -> Array:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols], dtype=np.float32)


def kaiming_uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> Array:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Network:
    """A sequential net built from a NetSpec. Parameters are named Tensors;
    every parameter belongs to exactly one layer."""

    def __init__(self, spec: Sequence[LayerSpec], seed: int, name: str = "net"):
        validate_netspec(spec)
        self.spec = list(spec)
        self.name = name
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for i, layer in enumerate(self.spec):
            if layer.kind == "dense":
                w = orthogonal_init(rng, layer.n_in, layer.n_out, layer.gain)
                self._add(f"{name}.{i}.W", w)
                self._add(f"{name}.{i}.b", np.zeros(layer.n_out, dtype=np.float32))
            elif layer.kind == "conv3d":
                shape = (layer.n_out, layer.n_in, _c3d.KSIZE, _c3d.KSIZE, _c3d.KSIZE)
                self._add(f"{name}.{i}.k", kaiming_uniform_init(rng, shape, layer.n_in * 27))
                self._add(f"{name}.{i}.b", np.zeros(layer.n_out, dtype=np.float32))
            elif layer.kind == "deconv3d":
                shape = (layer.n_in, layer.n_out, _c3d.KSIZE, _c3d.KSIZE, _c3d.KSIZE)
                self._add(f"{name}.{i}.k", kaiming_uniform_init(rng, shape, layer.n_in * 27))
                self._add(f"{name}.{i}.b", np.zeros(layer.n_out, dtype=np.float32))

    def _add(self, pname: str, data: Array) -> None:
        if pname in self.params:
            raise ConfigurationError(f"duplicate parameter {pname}")
        self.params[pname] = Tensor(data, requires_grad=True, name=pname)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.spec):
            if layer.kind == "activation":
                x = _ACTIVATIONS[layer.fn](x)
            elif layer.kind == "dense":
                x = forward_dense(x, self.params[f"{self.name}.{i}.W"], self.params[f"{self.name}.{i}.b"])
            elif layer.kind == "conv3d":
                x = conv3d(x, self.params[f"{self.name}.{i}.k"], self.params[f"{self.name}.{i}.b"],
                           layer.stride, layer.pad)
            elif layer.kind == "deconv3d":
                x = conv_transpose3d(x, self.params[f"{self.name}.{i}.k"], self.params[f"{self.name}.{i}.b"],
                                     layer.stride, layer.pad, layer.out_pad)
        return x

    __call__ = forward

    def state_dict(self) -> dict[str, Array]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise ContractViolation(f"checkpoint missing parameter {k}")
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != v.data.shape:
                raise ContractViolation(
                    f"checkpoint parameter {k} has shape {arr.shape}, expected {v.data.shape}"
                )
            v.data = arr.copy()


def mlp_spec(sizes: Sequence[int], act: str = "tanh", out_gain: float = 0.01) -> list[LayerSpec]:
    """Hidden layers with orthogonal gain 1 inits, final layer scaled down."""
    spec: list[LayerSpec] = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        spec.append(dense(sizes[i], sizes[i + 1], gain=out_gain if last else 1.0))
        if not last:
            spec.append(activation(act))
    return spec


# ----------------------------------------------------------------- adam ----


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        s = cls(lr=lr, **kw)
        for name, p in params.items():
            s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        return s


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """One bias-corrected Adam update in place. Parameters with no gradient
    are skipped; non-finite gradients abort with diagnostics."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise ContractViolation(
                f"adam_step: non-finite gradient for {name!r} "
                f"({bad}/{g.size} bad entries, |g|max={np.nanmax(np.abs(g)):.3g})"
            )
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(np.float32)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
