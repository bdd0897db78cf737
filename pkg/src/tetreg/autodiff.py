"""Minimal reverse-mode gradient engine over numpy arrays.

A Tensor wraps a float64 array and remembers the operation that produced
it. Calling backward() on a scalar walks the tape in reverse topological
order and accumulates exact gradients into every tensor created with
requires_grad. Only the handful of operations needed by the deformation
pyramid is implemented; everything stays in float64 so finite-difference
checks are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._grad_fn = grad_fn

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()

        def visit(t: Tensor) -> None:
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self._accumulate(np.ones_like(self.data))
        for t in reversed(order):
            if t._grad_fn is not None and t.grad is not None:
                t._grad_fn(t.grad)

    # Operator sugar; scalars and arrays are promoted to constants.
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._grad_fn = grad_fn
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out._grad_fn = grad_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._grad_fn = grad_fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b))

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._grad_fn = grad_fn
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    out = Tensor(y, parents=(x,))

    def grad_fn(g):
        x._accumulate(g * y * (1.0 - y))

    out._grad_fn = grad_fn
    return out


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data), parents=(x,))

    def grad_fn(g):
        x._accumulate(g * expit(x.data))

    out._grad_fn = grad_fn
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), parents=(x,))

    def grad_fn(g):
        x._accumulate(g / x.data)

    out._grad_fn = grad_fn
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient is passed through only inside the active range."""
    clipped = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    out = Tensor(clipped, parents=(x,))

    def grad_fn(g):
        x._accumulate(g * inside)

    out._grad_fn = grad_fn
    return out


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop], parents=(x,))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    out._grad_fn = grad_fn
    return out


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(x.data[index], parents=(x,))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    out._grad_fn = grad_fn
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), parents=(x,))

    def grad_fn(g):
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    out._grad_fn = grad_fn
    return out


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean(), parents=(x,))

    def grad_fn(g):
        x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    out._grad_fn = grad_fn
    return out


def quadratic_form(u: Tensor, matvec, scale: float = 1.0) -> Tensor:
    """scale * u^T A u for a fixed symmetric operator A given by ``matvec``.

    The backward pass is the analytic 2 * scale * A u, so the operator is
    applied once forward and once backward instead of being differentiated
    entry by entry.
    """
    flat = u.data.ravel()
    au = np.asarray(matvec(flat))
    out = Tensor(scale * float(flat @ au), parents=(u,))

    def grad_fn(g):
        u._accumulate((2.0 * scale * float(g)) * au.reshape(u.data.shape))

    out._grad_fn = grad_fn
    return out


@dataclass
class GradCheckResult:
    max_rel_error: float
    rel_errors: np.ndarray
    abs_errors: np.ndarray
    coords: list[tuple[int, int]]


def _loss_value(loss_fn) -> float:
    out = loss_fn()
    return out.item() if isinstance(out, Tensor) else float(out)


def grad_check(
    loss_fn,
    params: list[Tensor],
    eps: float = 1e-4,
    n_coords: int = 50,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare reverse-mode gradients against central finite differences.

    Samples ``n_coords`` parameter coordinates (all, if fewer exist) and
    perturbs each by +/- eps. The loss function must rebuild its graph from
    the current parameter values on every call.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.permutation(total)[: min(n_coords, total)]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    coords: list[tuple[int, int]] = []
    abs_errors = np.empty(len(picks))
    rel_errors = np.empty(len(picks))
    for k, flat_idx in enumerate(picks):
        pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[pi])
        coords.append((pi, local))
        view = params[pi].data.ravel()
        orig = view[local]
        view[local] = orig + eps
        f_plus = _loss_value(loss_fn)
        view[local] = orig - eps
        f_minus = _loss_value(loss_fn)
        view[local] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        ad = grads[pi].ravel()[local]
        abs_errors[k] = abs(fd - ad)
        rel_errors[k] = abs_errors[k] / max(abs(fd), abs(ad), 1e-8)
    return GradCheckResult(
        max_rel_error=float(rel_errors.max(initial=0.0)),
        rel_errors=rel_errors,
        abs_errors=abs_errors,
        coords=coords,
    )
