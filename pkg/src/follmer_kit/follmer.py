"""Compensated Riemann sums, the pathwise integral and the change-of-variable residual.

Functionals take values in a normed vector space.  Two calling conventions
are supported:

* ``vectorized=True``: callables accept arrays ``t`` and ``x`` of shape ``(m,)``
  and return arrays with leading axis ``m`` (shape ``(m,)`` for scalars or
  ``(m, N)`` for grid-valued functionals).  Sums are then array reductions.
* ``vectorized=False``: callables take scalars and return any object with
  ``+`` and scalar ``*`` (floats, :class:`~follmer_kit.operators.GridField`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from . import kernels
from .pathgen import Partition, PartitionSequence, SamplePath, make_partition
from .variation import VariationEstimate, check_even_p

DEFAULT_TOL_REL = 1e-2


def default_norm(v) -> float:
    if hasattr(v, "norm"):
        return float(v.norm())
    return float(np.linalg.norm(np.ravel(np.asarray(v))))


@dataclass(frozen=True, eq=False)
class SmoothFunctional:
    """A functional ``f(t, x)`` of class C^{1,p} with analytic derivatives.

    Parameters
    ----------
    p : int
        Even order of the ambient variation.
    value : callable
        ``(t, x) -> f(t, x)``.
    dt : callable
        ``(t, x) -> d/dt f(t, x)``.
    dxk : sequence of callables
        ``dxk[k-1]`` is the k-th x-derivative, for ``k = 1..p``.
    vectorized : bool
        Calling convention, see the module docstring.
    norm : callable, optional
        Norm on the value space; defaults to the Euclidean norm of the samples.
    """

    p: int
    value: Callable
    dt: Callable
    dxk: Sequence[Callable]
    vectorized: bool = True
    norm: Callable[[Any], float] = default_norm
    name: str = ""

    def __post_init__(self):
        check_even_p(self.p)
        object.__setattr__(self, "dxk", tuple(self.dxk))
        if len(self.dxk) != self.p:
            raise ValueError(f"dxk needs exactly p={self.p} derivatives, got {len(self.dxk)}")

    def derivative(self, k: int) -> Callable:
        return self.value if k == 0 else self.dxk[k - 1]

    def scaled(self, c: float) -> SmoothFunctional:
        def sc(fn):
            return lambda t, x: c * fn(t, x)

        return SmoothFunctional(self.p, sc(self.value), sc(self.dt), [sc(d) for d in self.dxk],
                                self.vectorized, self.norm, f"{c}*{self.name}")

    def __add__(self, other: SmoothFunctional) -> SmoothFunctional:
        if other.p != self.p or other.vectorized != self.vectorized:
            raise ValueError("functionals must share p and calling convention")

        def add(f, g):
            return lambda t, x: f(t, x) + g(t, x)

        return SmoothFunctional(self.p, add(self.value, other.value), add(self.dt, other.dt),
                                [add(f, g) for f, g in zip(self.dxk, other.dxk)],
                                self.vectorized, self.norm, f"{self.name}+{other.name}")


def _eval(fn: Callable, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(t, x))
    if out.ndim == 0:
        out = np.full(t.shape, out.item(), dtype=out.dtype)
    return out


def polynomial_functional(coeffs, p: int) -> SmoothFunctional:
    """Time-independent ``f(x) = sum_i coeffs[i] x**i`` with exact derivatives."""
    poly = Polynomial(np.asarray(coeffs, dtype=np.float64))
    ders = [poly.deriv(k) for k in range(1, p + 1)]

    def wrap(q):
        return lambda t, x: q(np.asarray(x, dtype=np.float64))

    return SmoothFunctional(p, wrap(poly), lambda t, x: np.zeros_like(np.asarray(x, float)),
                            [wrap(q) for q in ders], name=f"poly{list(poly.coef)}")


def monomial_functional(q: int, p: int, scale: float = 1.0) -> SmoothFunctional:
    """``f(x) = scale * x**q``."""
    coeffs = np.zeros(q + 1)
    coeffs[q] = scale
    return polynomial_functional(coeffs, p)


def time_linear_functional(p: int) -> SmoothFunctional:
    """``f(t, x) = t * x``."""
    zero = lambda t, x: np.zeros_like(np.asarray(x, dtype=np.float64))  # noqa: E731
    return SmoothFunctional(p, lambda t, x: t * x, lambda t, x: np.asarray(x, dtype=np.float64),
                            [lambda t, x: np.asarray(t, dtype=np.float64) + 0 * x]
                            + [zero] * (p - 1), name="t*x")


def check_derivatives(F: SmoothFunctional, rng: np.random.Generator, n: int = 20,
                      rtol: float = 1e-5, scale: float = 1.0) -> float:
    """Largest relative mismatch between ``dxk[k]`` and a central difference of ``dxk[k-1]``.

    Scalar, vectorized functionals only.  Also checks ``dt`` against the value.
    """
    t = rng.uniform(0.05, 0.95, n)
    x = rng.normal(0.0, scale, n)
    worst = 0.0
    pairs = [(F.value, F.dt, "t")] + [(F.derivative(k - 1), F.derivative(k), "x")
                                      for k in range(1, F.p + 1)]
    for lower, upper, var in pairs:
        ref = _eval(upper, t, x)
        h = 1e-4 * np.maximum(1.0, np.abs(x if var == "x" else t))
        if var == "x":
            fd = (_eval(lower, t, x + h) - _eval(lower, t, x - h)) / (2 * h)
        else:
            fd = (_eval(lower, t + h, x) - _eval(lower, t - h, x)) / (2 * h)
        err = np.abs(fd - ref) / (1.0 + np.abs(ref))
        worst = max(worst, float(err.max()))
    if worst > rtol:
        raise ValueError(f"analytic derivatives disagree with finite differences ({worst:.2e})")
    return worst


def _truncated_increments(path: SamplePath, partition: Partition, t: float):
    pts = partition.points
    vals = partition.values_on(path)
    active = pts[:-1] < t
    m = int(np.count_nonzero(active))
    right = np.where(pts[1 : m + 1] <= t, vals[1 : m + 1], path(t))
    return pts[:m], vals[:m], right - vals[:m]


def compensated_sum(F: SmoothFunctional, path: SamplePath, partition: Partition, t: float = 1.0):
    """Sum over intervals of sum_{k<p} d_x^k f(t_j, w_j) (w_{t_{j+1} ^ t} - w_{t_j ^ t})^k / k!."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    tj, xj, dx = _truncated_increments(path, partition, t)
    K = F.p - 1

    if not F.vectorized:
        total = None
        for j in range(tj.size):
            term = None
            for k in range(K, 0, -1):
                c = F.dxk[k - 1](float(tj[j]), float(xj[j])) * (1.0 / math.factorial(k))
                term = c if term is None else term * float(dx[j]) + c
            term = term * float(dx[j])
            total = term if total is None else total + term
        if total is None:
            return F.value(float(t), float(path(t))) * 0.0
        return total

    derivs = [_eval(F.dxk[k - 1], tj, xj) for k in range(1, K + 1)]
    if derivs[0].ndim == 1:
        return kernels.compensated_sum(np.ascontiguousarray(np.array(derivs, dtype=np.float64)),
                                       np.ascontiguousarray(dx))
    total = 0.0
    for k, d in enumerate(derivs, start=1):
        total = total + np.tensordot(dx**k, d, axes=(0, 0)) / math.factorial(k)
    return total


class FollmerResult(NamedTuple):
    value: Any
    per_level: dict[int, Any]
    converged: bool


def follmer_integral(F: SmoothFunctional, path: SamplePath, seq: PartitionSequence,
                     t: float = 1.0, levels=None, tol_rel: float = DEFAULT_TOL_REL) -> FollmerResult:
    """Compensated sums along the sequence; the finest level is reported as the value.

    ``converged`` requires at least two levels and compares the last two.
    """
    levels = tuple(seq.levels if levels is None else levels)
    per_level = {n: compensated_sum(F, path, make_partition(seq, n), t) for n in levels}
    last = per_level[levels[-1]]
    converged = False
    if len(levels) >= 2:
        prev = per_level[levels[-2]]
        converged = F.norm(last - prev) < tol_rel * (1.0 + F.norm(last))
    return FollmerResult(last, per_level, bool(converged))


def _finest_nodes(variation: VariationEstimate, t: float) -> np.ndarray:
    grid = variation.limit_grid
    u = grid[grid < t]
    return np.append(u, t)


def correction_terms(F: SmoothFunctional, path: SamplePath, variation: VariationEstimate,
                     t: float = 1.0):
    """``(int_0^t d_t f du, (1/p!) int_0^t d_x^p f d[w]_p)`` on the finest grid.

    Trapezoid rule for the first, left-point Riemann-Stieltjes sum for the second.
    """
    if variation.p != F.p:
        raise ValueError(f"functional has p={F.p} but the variation has p={variation.p}")
    u = _finest_nodes(variation, t)
    w = np.asarray(path(u))
    if F.vectorized:
        dtv = _eval(F.dt, u, w)
        du_term = np.trapezoid(dtv, u, axis=0)
        dp = _eval(F.dxk[-1], u[:-1], w[:-1])
        masses = np.diff(np.asarray(variation(u)))
        var_term = np.tensordot(masses, dp, axes=(0, 0)) / math.factorial(F.p)
        return du_term, var_term

    h = np.diff(u)
    masses = np.diff(np.asarray(variation(u)))
    vals = [F.dt(float(a), float(b)) for a, b in zip(u, w)]
    du_term = _accumulate((vals[j] + vals[j + 1]) * (0.5 * h[j]) for j in range(h.size))
    var_term = _accumulate(F.dxk[-1](float(u[j]), float(w[j])) * float(masses[j])
                           for j in range(h.size))
    return du_term, var_term * (1.0 / math.factorial(F.p))


def _accumulate(terms):
    # sum() starts from int 0, which not every value space accepts
    total = None
    for term in terms:
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class ResidualTable:
    levels: tuple[int, ...]
    value_norms: np.ndarray
    residuals: np.ndarray
    relative: bool = False

    @property
    def final(self) -> float:
        return float(self.residuals[-1])

    def to_csv(self, file) -> None:
        np.savetxt(file, np.column_stack([self.levels, self.value_norms, self.residuals]),
                   delimiter=",", header="level,value_norm,residual", comments="",
                   fmt=["%d", "%.17g", "%.17g"])


def ito_follmer_residuals(F: SmoothFunctional, path: SamplePath, seq: PartitionSequence,
                          variation: VariationEstimate, t: float = 1.0, levels=None,
                          relative: bool = False) -> ResidualTable:
    """Change-of-variable defect for every level of the sequence.

    With ``relative=True`` each residual is divided by ``1 + |f(t, w_t)|``.
    """
    du_term, var_term = correction_terms(F, path, variation, t)
    levels = tuple(seq.levels if levels is None else levels)
    wt, w0 = float(path(t)), float(path(0.0))
    if F.vectorized:
        ft = _eval(F.value, np.array([t]), np.array([wt]))[0]
        f0 = _eval(F.value, np.array([0.0]), np.array([w0]))[0]
    else:
        ft, f0 = F.value(t, wt), F.value(0.0, w0)
    lhs = ft - f0 - du_term - var_term
    scale = 1.0 + F.norm(ft) if relative else 1.0
    norms, res = [], []
    for n in levels:
        cs = compensated_sum(F, path, make_partition(seq, n), t)
        norms.append(F.norm(cs))
        res.append(F.norm(lhs - cs) / scale)
    return ResidualTable(levels, np.array(norms), np.array(res), relative)


def ito_follmer_residual(F: SmoothFunctional, path: SamplePath, seq: PartitionSequence,
                         variation: VariationEstimate, t: float = 1.0,
                         relative: bool = False) -> float:
    """Residual of the change-of-variable formula at the finest level of ``seq``."""
    return ito_follmer_residuals(F, path, seq, variation, t, (seq.finest,), relative).final
