"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-free autograd: every op builds a node holding its parents and
a closure that maps the output gradient to parent gradients. `backward()`
walks the graph once in reverse topological order. All buffers are
float64; any op producing NaN/Inf raises NumericError at construction.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "tensor",
    "concat",
    "stack",
    "matmul",
    "softmax",
    "no_grad",
    "grad_enabled",
    "grad_check",
    "max_grad_error",
]


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NumericError(ArithmeticError):
    """A forward value became NaN/Inf, or a numeric routine broke down."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Immutable-after-forward dense array with an optional grad slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp) -> "Tensor":
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=needs)
        if needs:
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of `self` w.r.t. every requires_grad leaf.

        `self` must be a scalar unless `grad` supplies the seed. Each graph
        node is visited exactly once, in reverse topological order.
        """
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        data = self.data + other.data
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        data = self.data - other.data
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(data, (a, b), vjp)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        data = self.data * other.data
        a, b = self, other

        def vjp(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._from_op(data, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        with np.errstate(all="ignore"):
            data = self.data / other.data
        a, b = self, other

        def vjp(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._from_op(data, (a, b), vjp)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise DimensionError("only scalar exponents are supported")
        data = self.data**exponent
        a = self

        def vjp(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._from_op(data, (a,), vjp)

    def __getitem__(self, index):
        data = self.data[index]
        a = self

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._from_op(np.array(data), (a,), vjp)

    # -- elementwise ---------------------------------------------------

    def exp(self):
        with np.errstate(all="ignore"):
            data = np.exp(self.data)
        return Tensor._from_op(data, (self,), lambda g: (g * data,))

    def log(self):
        a = self
        with np.errstate(all="ignore"):
            data = np.log(self.data)
        return Tensor._from_op(data, (a,), lambda g: (g / a.data,))

    def sqrt(self):
        with np.errstate(all="ignore"):
            data = np.sqrt(self.data)
        return Tensor._from_op(data, (self,), lambda g: (g * 0.5 / data,))

    def tanh(self):
        data = np.tanh(self.data)
        return Tensor._from_op(data, (self,), lambda g: (g * (1.0 - data * data),))

    def relu(self):
        data = np.maximum(self.data, 0.0)
        mask = (self.data > 0.0).astype(np.float64)
        return Tensor._from_op(data, (self,), lambda g: (g * mask,))

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes through the non-saturated region."""
        data = np.clip(self.data, lo, hi)
        mask = ((self.data >= lo) & (self.data <= hi)).astype(np.float64)
        return Tensor._from_op(data, (self,), lambda g: (g * mask,))

    # -- reductions / shape --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, a.shape).copy(),)

        return Tensor._from_op(np.array(data), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis] if isinstance(axis, int) else int(
                np.prod([self.shape[ax] for ax in axis])
            )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = self.data.reshape(shape)
        return Tensor._from_op(data, (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        data = self.data.transpose(axes)
        return Tensor._from_op(data, (self,), lambda g: (g.transpose(inverse),))

    def swap_last(self):
        """Swap the last two axes (matrix transpose for stacked matrices)."""
        if self.ndim < 2:
            raise DimensionError("swap_last needs ndim >= 2")
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return self.transpose(axes)

    def broadcast_to(self, shape):
        shape = tuple(shape)
        a = self
        data = np.broadcast_to(self.data, shape).copy()
        return Tensor._from_op(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked lhs against 2-D rhs and equal-ndim stacks."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2 (reshape first)")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    if not (b.ndim == 2 or a.shape[:-2] == b.shape[:-2]):
        raise DimensionError(
            f"matmul batch dimensions disagree: {a.shape} @ {b.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, *a.shape[-2:])
            g2 = g.reshape(-1, *g.shape[-2:])
            gb = np.einsum("bij,bik->jk", a2, g2)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(data, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._from_op(data, tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        expanded.append(t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]))
    return concat(expanded, axis=axis)


# -- gradient checking --------------------------------------------------


def max_grad_error(
    f: Callable[..., Tensor],
    xs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max guarded relative error between analytic and central-difference grads.

    Inputs are perturbed coordinate-wise; `max_coords_per_input` subsamples
    coordinates (seeded) for large inputs. The guard floor keeps
    finite-difference noise on near-zero gradients from registering.
    """
    if eps <= 0:
        raise NumericError("eps must be positive")
    xs = list(xs)
    for x in xs:
        x.zero_grad()
    out = f(*xs)
    if out.size != 1:
        raise DimensionError("grad_check target must be scalar-valued")
    out.backward()

    worst = 0.0
    for x in xs:
        if not x.requires_grad:
            continue
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        n = x.data.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = range(n)
        for i in coords:
            idx = np.unravel_index(i, x.data.shape)
            orig = x.data[idx]
            h = eps * max(1.0, abs(orig))
            x.data[idx] = orig + h
            with no_grad():
                f_plus = float(f(*xs).data)
            x.data[idx] = orig - h
            with no_grad():
                f_minus = float(f(*xs).data)
            x.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(numeric):
                raise NumericError("non-finite value during finite differencing")
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst


def grad_check(
    f: Callable[..., Tensor],
    xs: Sequence[Tensor] | Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> bool:
    """True iff analytic gradients of scalar `f` match central differences."""
    if isinstance(xs, Tensor):
        xs = [xs]
    return max_grad_error(f, xs, eps=eps, max_coords_per_input=max_coords_per_input, rng=rng) < tol
