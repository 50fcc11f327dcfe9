"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each operation records its inputs and a closure that pushes the output
gradient back to them. ``Tensor.backward`` walks the recorded graph in reverse
topological order and then frees it, so a training loop builds one fresh graph
per step.

Broadcasting is deliberately limited: binary operations accept operands of
identical shape, or an operand holding a single value. Anything else must be
reshaped explicitly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                _raise_not_scalar(self.shape)
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the graph; leaves keep their accumulated gradients
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape) if g.shape != self.shape else g

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_not_scalar(shape):
    raise ShapeError(f"expected a scalar tensor, got shape {shape}")


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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    # t holds a single value broadcast over g
    return np.asarray(g.sum()).reshape(t.shape)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b))

    return _make(out, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b))

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b))

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

    return _make(np.power(a.data, exponent), (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * 0.5 / out))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: a._accumulate(g * np.sign(a.data)))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    passthrough = out == a.data
    return _make(out, (a,), lambda g: a._accumulate(g * passthrough))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inverse)))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, tensors, backward)


def take(a, index) -> Tensor:
    """Numpy-style indexing (basic or advanced); repeated indices accumulate."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (N, C_in, H, W) or (C_in, H, W); ``w`` is (C_out, C_in, k, k);
    ``b`` is an optional (C_out,) bias.
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: incompatible shapes {b.shape} and {w.shape}")
    n, c, h, wd = xd.shape
    kh, kw = w.shape[2], w.shape[3]
    p, s = padding, stride
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(w.shape[0], -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g = g.reshape(n, -1, ho, wo)
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
            x._accumulate(gx[0] if unbatched else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out[0] if unbatched else out, parents, backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
    n_samples: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. Up to ``n_samples`` coordinates of
    ``x`` are probed (all of them when ``x`` is smaller).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    loss.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    rng = np.random.default_rng(seed)
    flat = base.size
    coords = np.arange(flat) if flat <= n_samples else rng.choice(flat, size=n_samples, replace=False)
    worst = 0.0
    with no_grad():
        for k in coords:
            probe = base.copy().reshape(-1)
            probe[k] += eps
            up = f(Tensor(probe.reshape(base.shape))).item()
            probe[k] -= 2 * eps
            down = f(Tensor(probe.reshape(base.shape))).item()
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
