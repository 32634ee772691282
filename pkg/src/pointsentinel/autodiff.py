"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every node is a :class:`Tensor` holding a float array, an optional gradient
buffer and a closure that pushes its output gradient to its parents. Values
are float32 by default; :func:`precision` switches the dtype of newly created
tensors, which the gradient-check utilities use to run in float64.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Tensor",
    "add",
    "avgpool2d",
    "backward",
    "clip",
    "conv2d",
    "detach",
    "div",
    "exp",
    "global_avgpool",
    "linear",
    "log",
    "matmul",
    "max_reduce",
    "mean",
    "mul",
    "precision",
    "relu",
    "reshape",
    "sigmoid",
    "square",
    "sub",
    "sum",
    "tensor",
    "transpose",
]

_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create tensors with ``dtype`` inside the block (thread-local)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Graph:
    """Records the nodes created while it is active, in creation order.

    Creation order is a topological order because a node can only be built
    from nodes that already exist.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = getattr(_state, "graph", None)
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "graph_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(_parents) if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None
        graph = getattr(_state, "graph", None)
        if graph is not None:
            self.graph_id = len(graph.nodes)
            graph.nodes.append(self)
        else:
            self.graph_id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data, _parents=parents, op=op)
    if out.requires_grad:
        out._backward = fn
    return out


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand broadcast against a tensor
    if g.shape != t.shape:
        return np.asarray(g.sum()).reshape(t.shape)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")

    def fn(g):
        a._accumulate(_reduce_to(g, a))
        b._accumulate(_reduce_to(g, b))

    return _node(a.data + b.data, (a, b), "add", fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")

    def fn(g):
        a._accumulate(_reduce_to(g, a))
        b._accumulate(_reduce_to(-g, b))

    return _node(a.data - b.data, (a, b), "sub", fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b))

    return _node(a.data * b.data, (a, b), "mul", fn)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "div")
    out_data = a.data / b.data

    def fn(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * out_data / b.data, b))

    return _node(out_data, (a, b), "div", fn)


def square(x: Tensor) -> Tensor:
    def fn(g):
        x._accumulate(2.0 * x.data * g)

    return _node(x.data * x.data, (x,), "square", fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")

    def fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias shared across rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match {w.shape[1]} outputs")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(out, parents, "linear", fn)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: ({size}+2*{pad}-{k})/{stride}+1 is not a positive integer"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``w`` (O×C×k×k), no kernel flip.

    ``x`` is C×H×W, or a channel-major batch C×N×H×W; the output has the
    same layout with O channels. Channel-major batches let the im2col matrix
    feed the product directly without transposes.
    """
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[:, None]
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: bad input/kernel ranks {x.shape}, {w.shape}")
    c, n, h, wid = xd.shape
    o, c_w, k, k2 = w.shape
    if c != c_w or k != k2 or k < 1:
        raise ValueError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    ho = _conv_out(h, k, stride, pad)
    wo = _conv_out(wid, k, stride, pad)

    if pad:
        xp = np.zeros((c, n, h + 2 * pad, wid + 2 * pad), dtype=xd.dtype)
        xp[:, :, pad:-pad, pad:-pad] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, n, ho, wo)
    if not batched:
        out = out[:, 0]

    def fn(g):
        gmat = g.reshape(o, -1)
        if w.requires_grad:
            w._accumulate((gmat @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=1))
        if x.requires_grad and stride == 1 and k > 1 and pad == k - 1 - pad:
            # 'same' stride-1 case: input gradient is a correlation with the flipped kernel
            gp = np.zeros((o, n, ho + 2 * pad, wo + 2 * pad), dtype=g.dtype)
            gp[:, :, pad:-pad, pad:-pad] = g.reshape(o, n, ho, wo)
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3)).transpose(0, 4, 5, 1, 2, 3)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = (wflip @ gcols.reshape(o * k * k, -1)).reshape(c, n, h, wid)
            x._accumulate(dx if batched else dx[:, 0])
        elif x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            dx = dxp[:, :, pad : pad + h, pad : pad + wid] if pad else dxp
            x._accumulate(dx if batched else dx[:, 0])

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, "conv2d", fn)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def fn(g):
        x._accumulate(np.transpose(g, inv))

    return _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), "transpose", fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        x._accumulate(g * mask)

    return _node(x.data * mask, (x,), "relu", fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # branch-free stable form
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def fn(g):
        x._accumulate(g * s * (1.0 - s))

    return _node(s, (x,), "sigmoid", fn)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def fn(g):
        x._accumulate(g * e)

    return _node(e, (x,), "exp", fn)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")

    def fn(g):
        x._accumulate(g / x.data)

    return _node(np.log(x.data), (x,), "log", fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping is active."""
    inside = (x.data >= lo) & (x.data <= hi)

    def fn(g):
        x._accumulate(g * inside)

    return _node(np.clip(x.data, lo, hi), (x,), "clip", fn)


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(gk, x.shape))

    return _node(out, (x,), "sum", fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis, keepdims), 1.0 / count)


def max_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal element."""
    axes = _norm_axis(axis, x.data.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise ValueError("max_reduce over an empty axis")
    keep = [a for a in range(x.data.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def fn(g):
        gflat = np.zeros(flat.shape, dtype=x.data.dtype)
        gv = np.asarray(g).reshape(idx.shape)
        np.put_along_axis(gflat, idx[..., None], gv[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        x._accumulate(np.transpose(gmoved, np.argsort(keep + list(axes))))

    return _node(np.asarray(out), (x,), "max_reduce", fn)


def reshape(x: Tensor, shape) -> Tensor:
    def fn(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), "reshape", fn)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k average pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d: {h}x{w} not divisible by {k}")
    v = x.data.reshape(*lead, h // k, k, w // k, k)
    out = v.mean(axis=(-3, -1))

    def fn(g):
        gg = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        x._accumulate(gg)

    return _node(out, (x,), "avgpool2d", fn)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring ancestor of a scalar ``loss``.

    Intermediate gradients are released after use; leaf gradients accumulate
    across calls until cleared.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    loss.grad = np.ones(loss.shape, dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                node.grad = None
