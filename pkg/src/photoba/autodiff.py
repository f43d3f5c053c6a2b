"""Forward-mode automatic differentiation over numpy arrays.

A :class:`Dual` carries a value array and, for every element, a fixed-width
vector of partial derivatives with respect to the active parameter block.
Arithmetic on duals applies the chain rule exactly, so any function written
with the supported primitives (``+ - * /``, integer powers, ``sqrt`` and the
bilinear sampler in :mod:`photoba.imaging`) yields exact Jacobians.

Values are arrays so a whole batch of residual blocks is differentiated in one
pass; the derivative array has shape ``val.shape + (width,)``.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# set by primitives that had to take a one-sided derivative (bilinear lattice)
_one_sided = contextvars.ContextVar("one_sided", default=False)


def mark_one_sided() -> None:
    _one_sided.set(True)


def _bcast_der(der: np.ndarray, shape: tuple) -> np.ndarray:
    target = tuple(shape) + der.shape[-1:]
    if der.shape == target:
        return der
    return np.broadcast_to(der, target)


class Dual:
    """Array of dual numbers: values plus per-element gradient rows."""

    __slots__ = ("val", "der")
    # make ndarray <op> Dual defer to the reflected Dual operator
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)
        if self.der.shape[:-1] != self.val.shape:
            self.der = _bcast_der(self.der, self.val.shape)

    @classmethod
    def constant(cls, val, width: int) -> "Dual":
        val = np.asarray(val, dtype=float)
        return cls(val, np.zeros(val.shape + (width,)))

    @classmethod
    def variable(cls, val, index: int, width: int) -> "Dual":
        """Seed ``val`` as the parameter at slot ``index`` of the block."""
        val = np.asarray(val, dtype=float)
        der = np.zeros(val.shape + (width,))
        der[..., index] = 1.0
        return cls(val, der)

    @property
    def width(self) -> int:
        return self.der.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.val.shape

    def __repr__(self) -> str:
        return f"Dual(val={self.val!r}, width={self.width})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            v = self.val + other.val
            return Dual(v, _bcast_der(self.der, v.shape) + _bcast_der(other.der, v.shape))
        v = self.val + other
        return Dual(v, _bcast_der(self.der, np.shape(v)))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __sub__(self, other):
        if isinstance(other, Dual):
            v = self.val - other.val
            return Dual(v, _bcast_der(self.der, v.shape) - _bcast_der(other.der, v.shape))
        v = self.val - other
        return Dual(v, _bcast_der(self.der, np.shape(v)))

    def __rsub__(self, other):
        v = other - self.val
        return Dual(v, -_bcast_der(self.der, np.shape(v)))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.der * other.val[..., None] + other.der * self.val[..., None],
            )
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.der * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            v = self.val / other.val
            return Dual(v, (self.der - v[..., None] * other.der) / other.val[..., None])
        other = np.asarray(other, dtype=float)
        return Dual(self.val / other, self.der / other[..., None])

    def __rtruediv__(self, other):
        v = np.asarray(other, dtype=float) / self.val
        return Dual(v, -(v / self.val)[..., None] * self.der)

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("Dual supports integer powers only")
        if n == 0:
            return Dual.constant(np.ones_like(self.val), self.width)
        return Dual(self.val**n, (n * self.val ** (n - 1))[..., None] * self.der)

    def sqrt(self) -> "Dual":
        s = np.sqrt(self.val)
        return Dual(s, self.der / (2.0 * s)[..., None])

    # reductions and shaping ---------------------------------------------
    def sum(self, axis: int = -1) -> "Dual":
        ax = axis % self.val.ndim
        return Dual(self.val.sum(axis=ax), self.der.sum(axis=ax))

    def mean(self, axis: int = -1) -> "Dual":
        ax = axis % self.val.ndim
        return Dual(self.val.mean(axis=ax), self.der.mean(axis=ax))

    def expand(self) -> "Dual":
        """Append a unit axis to the value shape (for per-block broadcasting)."""
        return Dual(self.val[..., None], self.der[..., None, :])

    def __getitem__(self, idx) -> "Dual":
        # leading-axis indexing only; the derivative axis stays last
        return Dual(self.val[idx], self.der[idx])


def sqrt(x):
    return x.sqrt() if isinstance(x, Dual) else np.sqrt(x)


def value(x) -> np.ndarray:
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def jacobian_of(x, width: int) -> np.ndarray:
    """Derivative array of ``x``; zeros when ``x`` is a plain constant."""
    if isinstance(x, Dual):
        return x.der
    return np.zeros(np.shape(x) + (width,))


def stack(items: Sequence, width: int, axis: int = -1) -> Dual:
    vals = [value(i) for i in items]
    shape = np.broadcast_shapes(*[v.shape for v in vals])
    vals = [np.broadcast_to(v, shape) for v in vals]
    ders = [_bcast_der(jacobian_of(i, width), shape) for i in items]
    ax = axis % (len(shape) + 1)
    return Dual(np.stack(vals, axis=ax), np.stack(ders, axis=ax))


@dataclass
class Derivatives:
    value: np.ndarray
    jacobian: np.ndarray
    one_sided: bool = False


def evaluate_with_derivatives(
    fn: Callable, x, active: Sequence[int] | None = None
) -> Derivatives:
    """Evaluate ``fn`` at ``x`` seeding the ``active`` entries of ``x``.

    ``fn`` receives a 1-D :class:`Dual` and may return a Dual, an array or a
    scalar. The Jacobian has one row per flattened output element and one
    column per active parameter. If any primitive hit a non-differentiable
    point (a bilinear lattice line) the result is flagged ``one_sided``.
    """
    x = np.asarray(x, dtype=float).ravel()
    active = np.arange(x.size) if active is None else np.asarray(active, dtype=int)
    der = np.zeros((x.size, active.size))
    der[active, np.arange(active.size)] = 1.0
    token = _one_sided.set(False)
    try:
        out = fn(Dual(x, der))
        flagged = _one_sided.get()
    finally:
        _one_sided.reset(token)
    val = value(out)
    jac = jacobian_of(out, active.size)
    return Derivatives(val, jac.reshape(val.size, active.size), flagged)


@dataclass
class FDReport:
    """Outcome of a central-difference comparison, one entry per column."""

    max_rel_error: float
    worst_param: int
    column_errors: np.ndarray
    flagged: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


def finite_difference_check(
    fn: Callable,
    point,
    step=1e-6,
    jacobian: np.ndarray | None = None,
    floor: float = 1e-8,
    kink_tol: float = 1e-2,
    rel_floor: float = 0.0,
) -> FDReport:
    """Compare an analytic Jacobian of ``fn`` against central differences.

    ``fn`` maps a float vector to an array. If ``jacobian`` is None it is
    obtained with :func:`evaluate_with_derivatives`. ``step`` may be a scalar
    or one step per parameter. Columns whose forward and backward differences
    disagree (a kink inside the stencil) are flagged and left out of the
    maximum rather than counted as failures. ``rel_floor`` bounds each
    column's denominator below by that fraction of the largest analytic
    column norm, so numerically-zero columns are judged on absolute error.
    """
    point = np.asarray(point, dtype=float).ravel()
    steps = np.broadcast_to(np.asarray(step, dtype=float), point.shape)
    if jacobian is None:
        jacobian = evaluate_with_derivatives(fn, point).jacobian
    f0 = np.asarray(fn(point), dtype=float).ravel()
    jacobian = np.asarray(jacobian).reshape(f0.size, point.size)
    errors = np.zeros(point.size)
    floor = max(floor, rel_floor * float(np.linalg.norm(jacobian, axis=0).max(initial=0.0)))
    flagged = []
    for i in range(point.size):
        h = steps[i]
        e = np.zeros_like(point)
        e[i] = h
        fp = np.asarray(fn(point + e), dtype=float).ravel()
        fm = np.asarray(fn(point - e), dtype=float).ravel()
        central = (fp - fm) / (2 * h)
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        scale = max(np.linalg.norm(central), np.linalg.norm(jacobian[:, i]), floor)
        if np.linalg.norm(fwd - bwd) > max(kink_tol * scale, 1e3 * floor):
            flagged.append(i)
            continue
        errors[i] = np.linalg.norm(jacobian[:, i] - central) / scale
    worst = int(np.argmax(errors)) if errors.size else -1
    return FDReport(float(errors.max(initial=0.0)), worst, errors, flagged)
