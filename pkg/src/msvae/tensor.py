"""Dense tensors with reverse-mode automatic differentiation.

Everything runs on numpy arrays. A Tensor remembers the operation that
produced it and its input tensors, so calling :func:`backward` on a scalar
loss replays the recorded graph in reverse topological order and accumulates
gradients into every tensor that requires them. Parameters live in a
:class:`Graph`, which also owns the seeded initializer RNG.

Precision is configurable per graph: float64 for verification (finite
difference checks are unreliable in float32), float32 for training speed.
Non-finite values are treated as an error state: every forward op and every
backward step raises as soon as a NaN/Inf appears, naming the offending node.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "square",
    "clamp",
    "tsum",
    "tmean",
    "concat",
    "narrow",
    "pad",
    "reshape",
    "conv1d",
    "conv_transpose1d",
    "avg_pool1d",
    "repeat1d",
    "write_array",
    "read_array",
    "OP_KINDS",
]

_node_counter = 0


def _next_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


class Tensor:
    """N-dimensional array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.node_id = _next_id()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _guard_finite(arr: np.ndarray, op: str, node_id: Optional[int] = None) -> None:
    if not np.all(np.isfinite(arr)):
        where = f" (node {node_id})" if node_id is not None else ""
        raise FloatingPointError(f"non-finite values produced by op '{op}'{where}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in out._parents)
    out._backward = backward_fn if out.requires_grad else None
    out.op = op
    out.node_id = _next_id()
    _guard_finite(data, op, out.node_id)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    # scalar (0-d) operands are the one permitted shape exception
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"op '{op}': shape mismatch {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"op '{op}': dtype mismatch {a.dtype} vs {b.dtype}")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    # undo 0-d scalar broadcasting; no other broadcasting is allowed
    if shape == () and grad.shape != ():
        return grad.sum()
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "div")
    with np.errstate(divide="ignore"):
        inv = 1.0 / b.data

    def bw(g):
        return _reduce_to(g * inv, a.shape), _reduce_to(-g * a.data * inv * inv, b.shape)

    return _make(a.data * inv, (a, b), "div", bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        return (-g,)

    return _make(-a.data, (a,), "neg", bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), "tanh", bw)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), "sigmoid", bw)


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def bw(g):
        return (g * _sigmoid_stable(a.data),)

    return _make(y, (a,), "softplus", bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)

    return _make(y, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make(y, (a,), "log", bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (g * 2.0 * a.data,)

    return _make(a.data * a.data, (a,), "square", bw)


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    y = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    # gradient passes at the boundary itself (subgradient convention: pass)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bw(g):
        return (g * inside,)

    return _make(y, (a,), "clamp", bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(y), (a,), "sum", bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(y), (a,), "mean", bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = list(np.cumsum(sizes[:-1]))

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(
            f"op 'slice': window [{start}, {start + length}) out of bounds for axis {axis} of shape {a.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), "slice", bw)


def pad(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(before, before + a.shape[axis])
    idx = tuple(idx)

    def bw(g):
        return (g[idx].copy(),)

    return _make(np.pad(a.data, widths), (a,), "pad", bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


# ---------------------------------------------------------------------------
# convolution primitives (batch, channels, time)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """Causal 1-d convolution.

    Left-pads by (k-1)*dilation zeros, so output index t depends only on
    input indices <= t*stride. Requires the time extent to divide by stride.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ValueError(f"op 'conv1d': expected 3-d input/weight, got {x.shape} and {w.shape}")
    B, Cin, T = x.shape
    Cout, Cin_w, K = w.shape
    if Cin != Cin_w:
        raise ValueError(f"op 'conv1d': input has {Cin} channels, weight expects {Cin_w}")
    if T % stride != 0:
        raise ValueError(f"op 'conv1d': time extent {T} not divisible by stride {stride}")
    lpad = (K - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (lpad, 0))) if lpad else x.data
    Tout = T // stride
    y = np.zeros((B, Cout, Tout), dtype=x.dtype)
    for j in range(K):
        xs = xp[:, :, j * dilation : j * dilation + (Tout - 1) * stride + 1 : stride]
        y += np.matmul(w.data[:, :, j], xs)
    y += b.data.reshape(1, Cout, 1)

    def bw(g):
        gw = np.zeros(w.shape, dtype=w.dtype)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for j in range(K):
            sl = slice(j * dilation, j * dilation + (Tout - 1) * stride + 1, stride)
            xs = xp[:, :, sl]
            gw[:, :, j] = np.tensordot(g, xs, axes=([0, 2], [0, 2]))
            gxp[:, :, sl] += np.matmul(w.data[:, :, j].T, g)
        gx = gxp[:, :, lpad:] if lpad else gxp
        return gx, gw, g.sum(axis=(0, 2))

    return _make(y, (x, w, b), "conv1d", bw)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Strided transposed 1-d convolution with kernel width == stride.

    Output time extent is exactly T*stride with no cropping; output position
    t*stride+j is a function of input position t only, so causality at the
    coarse rate carries over to the fine rate.
    """
    B, Cin, T = x.shape
    Cout, Cin_w, K = w.shape
    if Cin != Cin_w:
        raise ValueError(f"op 'conv_transpose1d': input has {Cin} channels, weight expects {Cin_w}")
    if K != stride:
        raise ValueError(f"op 'conv_transpose1d': kernel width {K} must equal stride {stride}")
    tmp = np.tensordot(x.data, w.data, axes=([1], [1]))  # [B, T, Cout, K]
    y = tmp.transpose(0, 2, 1, 3).reshape(B, Cout, T * K) + b.data.reshape(1, Cout, 1)

    def bw(g):
        gr = g.reshape(B, Cout, T, K)
        gw = np.tensordot(gr, x.data, axes=([0, 2], [0, 2])).transpose(0, 2, 1)  # [Cout, Cin, K]
        gx = np.tensordot(gr, w.data, axes=([1, 3], [0, 2])).transpose(0, 2, 1)  # [B, Cin, T]
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), g.sum(axis=(0, 2))

    return _make(np.ascontiguousarray(y), (x, w, b), "conv_transpose1d", bw)


def avg_pool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window average along time."""
    B, C, T = x.shape
    if T % window != 0:
        raise ValueError(f"op 'avg_pool1d': time extent {T} not divisible by window {window}")
    y = x.data.reshape(B, C, T // window, window).mean(axis=3)

    def bw(g):
        return (np.repeat(g / window, window, axis=2),)

    return _make(y, (x,), "avg_pool1d", bw)


def repeat1d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling along time."""
    B, C, T = x.shape

    def bw(g):
        return (g.reshape(B, C, T, factor).sum(axis=3),)

    return _make(np.repeat(x.data, factor, axis=2), (x,), "repeat1d", bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; contributes zero gradient backward."""
    out = Tensor(x.data.copy())
    out.op = "stop_gradient"
    return out


OP_KINDS = {
    "add": add,
    "sub": sub,
    "multiply": mul,
    "div": div,
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "clamp": clamp,
    "sum": tsum,
    "mean": tmean,
    "concat": concat,
    "slice": narrow,
    "pad": pad,
    "reshape": reshape,
    "conv1d": conv1d,
    "conv_transpose1d": conv_transpose1d,
    "avg_pool1d": avg_pool1d,
    "repeat1d": repeat1d,
    "stop_gradient": stop_gradient,
}


# ---------------------------------------------------------------------------
# parameters and backward pass


class Graph:
    """Named store for trainable parameters with a seeded initializer."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, shape, fan_in: Optional[int] = None) -> Tensor:
        """Register a trainable tensor.

        With fan_in set, initializes zero-mean uniform scaled by 1/sqrt(fan_in);
        otherwise zeros (the bias convention).
        """
        if name in self._params:
            raise ValueError(f"parameter '{name}' registered twice")
        if fan_in:
            a = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-a, a, size=shape).astype(self.dtype)
        else:
            data = np.zeros(shape, dtype=self.dtype)
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def param_count(self) -> int:
        return sum(int(t.data.size) for t in self._params.values())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter '{name}' in state")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"parameter '{name}': shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor, graph: Optional[Graph] = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(t) into t.grad for every tensor requiring gradients.

    Returns the gradient map over the graph's parameters when a graph is
    given (zeros for parameters the loss does not reach). Gradients sum into
    t.grad across multiple uses within this call; previous .grad contents are
    discarded.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient at op '{node.op}' (node {node.node_id})"
                )
            if parent.grad is None:
                parent.grad = np.zeros(parent.shape, dtype=parent.dtype)
            parent.grad += g
    if graph is None:
        return {}
    out = {}
    for name, t in graph.parameters().items():
        out[name] = t.grad if t.grad is not None else np.zeros(t.shape, dtype=t.dtype)
    return out


# ---------------------------------------------------------------------------
# serialization: little-endian header (rank, extents as u64) + float64 payload


def write_array(f, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    f.write(struct.pack("<Q", a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_array(f) -> np.ndarray:
    (rank,) = struct.unpack("<Q", f.read(8))
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
    return data.reshape(shape)
