"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` topologically sorts the
graph reachable from a scalar loss and accumulates gradients into leaves.
The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "constant",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "concat",
    "rotate_pairs",
    "norm",
    "backward",
    "grad_check",
    "LN_VAR_FLOOR",
]

LN_VAR_FLOOR = 1e-6

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


class Tensor:
    """A float64 array with an optional gradient and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # construction helpers
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        _broadcast_shape("add", a.shape, b.shape)

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        _broadcast_shape("mul", a.shape, b.shape)

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        _broadcast_shape("div", a.shape, b.shape)

        def bw(g):
            return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        p = float(exponent)
        x = self

        def bw(g):
            return (g * p * x.data ** (p - 1.0),)

        return Tensor._make(x.data ** p, (x,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        x = self
        out = x.data[index]

        def bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.array(out, dtype=np.float64), (x,), bw)

    # elementwise functions
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self
        return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    # reductions and layout
    def sum(self, axis=None, keepdims: bool = False):
        x = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        try:
            out = x.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
        return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, var_floor: float = LN_VAR_FLOOR) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, no affine.

    The variance is clamped from below at ``var_floor`` so a constant row
    maps to exactly zero.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var < var_floor
    sigma = np.sqrt(np.maximum(var, var_floor))
    xhat = xc / sigma

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        # below the floor sigma is constant, so the variance term drops out
        gx = np.where(floored, 0.0, gx)
        return ((g - gm - xhat * gx) / sigma,)

    return Tensor._make(xhat, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(u)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du),)

    return Tensor._make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def rotate_pairs(x: Tensor, re, im) -> Tensor:
    """Multiply channel pairs ``(2j, 2j+1)`` of ``x`` by complex numbers.

    ``re``/``im`` are constant arrays broadcastable to ``x.shape[:-1] + (d/2,)``.
    With unit-modulus multipliers this is a pair-wise planar rotation.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotate_pairs: last axis must be even, got {x.shape}")
    re = np.asarray(re, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    pair_shape = x.shape[:-1] + (d // 2,)
    _broadcast_shape("rotate_pairs", pair_shape, re.shape)
    xr = x.data.reshape(pair_shape + (2,))
    a, b = xr[..., 0], xr[..., 1]
    out = np.empty(np.broadcast_shapes(pair_shape, re.shape) + (2,))
    out[..., 0] = a * re - b * im
    out[..., 1] = a * im + b * re

    def bw(g):
        gr = g.reshape(out.shape)
        ga, gb = gr[..., 0], gr[..., 1]
        gx = np.empty(out.shape)
        gx[..., 0] = ga * re + gb * im
        gx[..., 1] = -ga * im + gb * re
        return (_unbroadcast(gx, pair_shape + (2,)).reshape(x.shape),)

    return Tensor._make(out.reshape(out.shape[:-2] + (-1,)), (x,), bw)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(n > 0, g * x.data / safe, 0.0),)

    return Tensor._make(np.asarray(out), (x,), bw)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Args:
        loss: scalar tensor.
        wrt: optional leaves; if given, their gradients are returned in order,
            zero-filled for leaves the loss does not depend on.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    if wrt is None:
        return None
    result = []
    for leaf in wrt:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        result.append(leaf.grad)
    return result


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative error for one coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = parameter(base)
    (analytic,) = backward(fn(x), wrt=[x])
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = fn(Tensor(base.copy())).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    diff = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(diff.max()) if diff.size else 0.0
