"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints.  ``backward`` walks the
recorded trace in reverse topological order.  Images and feature maps are
channels-last (``N, H, W, C``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NoTrace, ShapeMismatch

_TRACING = True


@contextlib.contextmanager
def no_trace():
    """Disable trace recording (forward-only evaluation)."""
    global _TRACING
    prev, _TRACING = _TRACING, False
    try:
        yield
    finally:
        _TRACING = prev


def tracing_enabled() -> bool:
    return _TRACING


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _TRACING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


# structural ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including leading batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), fn, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", src, tuple(shape) if not isinstance(shape, int) else (shape,)) from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeMismatch("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, fn, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    src = a.shape

    def fn(g):
        out = np.zeros(src)
        out[key] = g
        return (out,)

    return _result(a.data[key], (a,), fn, "slice")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along axis 0 with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]

    def fn(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), fn, "gather_rows")


def scatter_add_rows(a: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """``out[idx[k]] += a[k]`` into ``n`` rows; backward is a gather."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, idx, a.data)
    return _result(out, (a,), lambda g: (g[idx],), "scatter_add_rows")


# reductions & losses ---------------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _result(a.data.sum(axis=axis), (a,), fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch("mse_loss", pred.shape, target.shape)
    d = sub(pred, target)
    return mean(mul(d, d))


def l1_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch("l1_loss", pred.shape, target.shape)
    return mean(abs_(sub(pred, target)))


# convolution ---------------------------------------------------------------


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x: (N,H,W,C), w: (3,3,C,Co); stride 1, zero padding 1."""
    n, h, wd, _ = x.shape
    xp = np.zeros((n, h + 2, wd + 2, x.shape[3]))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((n, h, wd, w.shape[3]))
    for dy in range(3):
        for dx in range(3):
            out += xp[:, dy : dy + h, dx : dx + wd, :] @ w[dy, dx]
    return out


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = _conv3x3(x, w)
    return out if b is None else out + b


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, NHWC input, HWIO kernel ``(3, 3, C_in, C_out)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeMismatch("conv2d bias", w.shape, b.shape)
    n, h, wd, c = x.shape

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            # stride-1 "same" conv: adjoint is the conv with the flipped, transposed kernel
            gx = _conv3x3(g, w.data[::-1, ::-1].transpose(0, 1, 3, 2))
        if w.requires_grad:
            xp = np.zeros((n, h + 2, wd + 2, c))
            xp[:, 1:-1, 1:-1] = x.data
            g2 = g.reshape(-1, g.shape[3])
            gw = np.empty(w.shape)
            for dy in range(3):
                for dx in range(3):
                    gw[dy, dx] = xp[:, dy : dy + h, dx : dx + wd, :].reshape(-1, c).T @ g2
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(conv2d_raw(x.data, w.data, None if b is None else b.data), parents, fn, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of an NHWC tensor."""
    if x.ndim != 4:
        raise ShapeMismatch("upsample2x", x.shape, ("N", "H", "W", "C"))
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _result(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),), "upsample2x")


# backward --------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every traced leaf."""
    if loss.data.size != 1:
        raise ShapeMismatch("backward (scalar loss required)", loss.shape, ())
    if not loss.requires_grad:
        raise NoTrace("loss carries no trace back to any parameter")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each of ``params``; zeros where untouched."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
