"""Candidate strong solutions of dX = AX dt + BX d^pi w and their verification.

Three constructions:

* commutative closed form ``X(t) = G_B(w_t - w_0) exp(int_0^t C) x0`` with
  ``C(t) = A - rate(t) / p! * B^p``;
* non-commutative stepping ``X_{n+1} = G_B(dw_n) exp(dt C(t_n)) X_n`` for
  ``B = g d/dx`` and ``A = a d^2``;
* the dispersive case ``A = 1/8 d^4 + i(d^4 + d^2 - g)``, ``B = d/dx``, whose
  ``C`` is skew so every step is unitary.

Verification rebuilds the functional ``f(t, x) = G_B(x - w_0) v(t)`` and
measures the defect of the integral equation level by level.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Union

import numpy as np
from numpy.polynomial import Polynomial

from .follmer import SmoothFunctional, compensated_sum
from .operators import (
    FlowShiftGroup,
    GridField,
    MultiplierOperator,
    SpectralGrid,
    schrodinger_step,
    shift_group,
)
from .pathgen import PartitionSequence, SamplePath, make_partition
from .variation import (
    DEFAULT_WINDOW,
    VariationDerivative,
    VariationEstimate,
    check_even_p,
    gaussian_abs_moment,
    variation_derivative,
)

GROWTH_GUARD = 10.0
POLYFIT_DEGREE = 3

Rate = Union[str, float, VariationDerivative, Callable[[float], float]]


class NumericalGuardError(RuntimeError):
    """A step grew the norm beyond the guard or the field left the box."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoiseKind(str, enum.Enum):
    SCALAR = "scalar"
    SHIFT = "shift"


@dataclass(frozen=True)
class RateModel:
    """Derivative of the variation as it enters C(t), with its exact antiderivative."""

    rate: Callable[[float], float]
    exposure: Callable[[float], float]
    label: str

    @classmethod
    def constant(cls, c: float, label: str = "constant") -> RateModel:
        c = float(c)
        return cls(lambda t: c, lambda t: c * t, f"{label}({c:.17g})")

    @classmethod
    def resolve(cls, spec: Rate, variation: VariationEstimate | None,
                window: int = DEFAULT_WINDOW) -> RateModel:
        """Build the rate from a specification.

        ``"median"``: constant median of the windowed derivative.
        ``"derivative"``: the windowed derivative itself.
        ``"variation"``: windowed derivative, exposure read off the estimate.
        ``"polyfit[:deg]"``: derivative of a least-squares polynomial fit of the
        cumulative variation (smooth in t).
        A number, a :class:`VariationDerivative` or a callable are used as given.
        """
        if isinstance(spec, RateModel):
            return spec
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            return cls.constant(spec)
        if isinstance(spec, VariationDerivative):
            return cls(spec, spec.integral, "derivative")
        if isinstance(spec, str):
            if variation is None:
                raise ValueError(f"rate {spec!r} needs a variation estimate")
            if spec == "median":
                return cls.constant(variation_derivative(variation, window).median(), "median")
            if spec == "derivative":
                d = variation_derivative(variation, window)
                return cls(d, d.integral, "derivative")
            if spec.startswith("polyfit"):
                deg = int(spec.split(":")[1]) if ":" in spec else POLYFIT_DEGREE
                fit = Polynomial.fit(variation.limit_grid, variation.limit_values, deg)
                der = fit.deriv()
                f0 = fit(0.0)
                return cls(lambda t: der(t), lambda t: fit(t) - f0, f"polyfit({deg})")
            if spec == "variation":
                d = variation_derivative(variation, window)
                return cls(d, lambda t: variation(t) - variation(0.0), "variation")
            raise ValueError(f"unknown rate specification {spec!r}")
        if callable(spec):
            grid = np.linspace(0.0, 1.0, 4097)
            vals = np.array([spec(t) for t in grid])
            d = VariationDerivative(grid, vals)
            return cls(spec, d.integral, "callable")
        raise TypeError(f"cannot interpret rate {spec!r}")


@dataclass(eq=False)
class SolutionTrajectory:
    """States of a solution at output times, plus per-step diagnostics."""

    times: np.ndarray
    states: list
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.states) != self.times.size:
            raise ValueError("states and times differ in length")

    def __len__(self):
        return self.times.size

    def index_of(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= self.times.size or self.times[i] != t:
            raise KeyError(f"time {t!r} is not an output time of the trajectory")
        return i

    def at(self, t: float):
        return self.states[self.index_of(t)]

    def norms(self) -> np.ndarray:
        return np.array([s.norm() if isinstance(s, GridField) else abs(s) for s in self.states])

    def as_array(self) -> np.ndarray:
        if isinstance(self.states[0], GridField):
            return np.array([s.samples for s in self.states])
        return np.asarray(self.states, dtype=np.float64)

    def write(self, directory, every: int = 1) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        norms = self.norms()
        if isinstance(self.states[0], GridField):
            for i in range(0, len(self), every):
                self.states[i].to_csv(d / f"state_{i:05d}.csv")
        else:
            np.savetxt(d / "trajectory.csv", np.column_stack([self.times, self.as_array()]),
                       delimiter=",", header="t,value", comments="", fmt="%.17g")
        doc = {"meta": self.meta, "times": self.times.tolist(), "norms": norms.tolist()}
        (d / "trajectory.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _check_variation(p: int, variation: VariationEstimate | None):
    if variation is not None and variation.p != p:
        raise ValueError(f"problem has p={p} but the variation has p={variation.p}")


def _variation_fn(variation) -> Callable:
    if isinstance(variation, VariationEstimate):
        return variation
    if callable(variation):
        return variation
    raise TypeError("variation must be a VariationEstimate or a callable")


# -- scalar geometric ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalarGeometricProblem:
    a: float
    b: float
    p: int
    path: SamplePath
    variation: Any
    x0: float = 1.0

    def __post_init__(self):
        check_even_p(self.p)
        if isinstance(self.variation, VariationEstimate):
            _check_variation(self.p, self.variation)

    def descriptor(self) -> dict[str, Any]:
        return {"kind": "scalar_geometric", "a": self.a, "b": self.b, "p": self.p, "x0": self.x0}


def solve_scalar_geometric(a: float, b: float, p: int, path: SamplePath, variation,
                           times=None, x0: float = 1.0) -> SolutionTrajectory:
    """``Y(t) = x0 exp(b (w_t - w_0) + a t - b^p / p! [w]_p(t))``.

    ``variation`` is a :class:`VariationEstimate` or any callable ``t -> [w]_p(t)``
    (for instance the theoretical ``c_p t``).  Output times default to the limit
    grid of the estimate, else the path grid.
    """
    prob = ScalarGeometricProblem(a, b, p, path, variation, x0)
    V = _variation_fn(variation)
    if times is None:
        times = variation.limit_grid if isinstance(variation, VariationEstimate) else path.times
    times = np.asarray(times, dtype=np.float64)
    w = np.asarray(path(times)) - path(0.0)
    coef = b**p / math.factorial(p)
    states = x0 * np.exp(b * w + a * times - coef * np.asarray(V(times)))
    meta = {"problem": prob.descriptor(), "path": path.manifest()}
    return SolutionTrajectory(times, [float(s) for s in states], meta)


# -- commutative --------------------------------------------------------------


def noise_power_symbol(noise: NoiseKind, b: float, k: int) -> Callable:
    if noise is NoiseKind.SCALAR:
        return lambda xi: np.full(np.shape(xi), b**k, dtype=np.complex128)
    return lambda xi: (b * 1j * np.asarray(xi)) ** k


def _check_regime(sym: Callable, grid: SpectralGrid, what: str) -> None:
    """Real part of the symbol must not grow with |xi| (bounded above)."""
    re = np.asarray(sym(grid.xi)).real
    low = np.abs(grid.xi) <= np.abs(grid.xi).max() / 8
    if re.max() > max(re[low].max(), 0.0) + 1e-9 * max(1.0, np.abs(re).max()):
        raise ValueError(f"{what}: the real part of the generator symbol grows with |xi|; "
                         "need a > b^2/2 for p = 2, or an even p/2 regime")


@dataclass(frozen=True, eq=False)
class CommutativeProblem:
    """A is a multiplier, B is ``b Id`` (scalar noise) or ``b d/dx`` (shift noise)."""

    A: MultiplierOperator
    noise: NoiseKind
    b: float
    p: int
    x0: GridField
    path: SamplePath
    variation: VariationEstimate | None = None
    rate: Rate = "median"
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseKind(self.noise))
        check_even_p(self.p)
        _check_variation(self.p, self.variation)
        model = RateModel.resolve(self.rate, self.variation, self.window)
        object.__setattr__(self, "rate_model", model)
        bp = noise_power_symbol(self.noise, self.b, self.p)
        A, r0, pf = self.A.symbol, model.rate(0.0), math.factorial(self.p)
        _check_regime(lambda xi: np.asarray(A(xi)) - r0 / pf * bp(xi), self.x0.grid,
                      "commutative problem")

    @property
    def grid(self) -> SpectralGrid:
        return self.x0.grid

    def C_symbol(self, t: float) -> Callable:
        bp = noise_power_symbol(self.noise, self.b, self.p)
        r, A, pf = self.rate_model.rate(t), self.A.symbol, math.factorial(self.p)
        return lambda xi: np.asarray(A(xi)) - r / pf * bp(xi)

    def noise_group(self, x: float, u: GridField) -> GridField:
        if self.noise is NoiseKind.SCALAR:
            return u * math.exp(self.b * x)
        return shift_group(self.b, x).apply(u)

    def descriptor(self) -> dict[str, Any]:
        return {"kind": "commutative", "A": self.A.descriptor(self.grid), "noise": self.noise.value,
                "b": self.b, "p": self.p, "rate": self.rate_model.label}


def solve_commutative(prob: CommutativeProblem, times) -> SolutionTrajectory:
    """Closed form ``G_B(w_t - w_0) exp(t A - E(t) b^p/p! B^p) x0`` with ``E = int rate``."""
    times = np.asarray(times, dtype=np.float64)
    grid = prob.grid
    A = prob.A.values(grid)
    bp = noise_power_symbol(prob.noise, prob.b, prob.p)(grid.xi)
    pf = math.factorial(prob.p)
    x0_hat = np.fft.fft(prob.x0.samples)
    w0 = prob.path(0.0)
    states = []
    for t in times:
        if t == 0.0:
            states.append(GridField(grid, prob.x0.samples))
            continue
        m = np.exp(t * A - prob.rate_model.exposure(t) / pf * bp)
        v = np.fft.ifft(m * x0_hat)
        v = GridField(grid, v.real if prob.x0.is_real else v)
        states.append(prob.noise_group(prob.path(t) - w0, v))
    meta = {"problem": prob.descriptor(), "path": prob.path.manifest()}
    return SolutionTrajectory(times, states, meta)


# -- non-commutative parabolic ------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoncommParabolicProblem:
    """``A = a_diff d^2``, ``B = g d/dx``, ``p = 4``."""

    g: Callable[[np.ndarray], np.ndarray]
    a_diff: float
    x0: GridField
    path: SamplePath
    variation: VariationEstimate | None
    dt: float
    p: int = 4
    rate: Rate = "derivative"
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.p != 4:
            raise ValueError("the parabolic flow problem is set up for p = 4")
        if not self.a_diff >= 0:
            raise ValueError("a_diff must be non-negative")
        if not 0 < self.dt <= 1:
            raise ValueError(f"dt must lie in (0, 1], got {self.dt}")
        _check_variation(self.p, self.variation)
        object.__setattr__(self, "rate_model", RateModel.resolve(self.rate, self.variation,
                                                                 self.window))

    @property
    def grid(self) -> SpectralGrid:
        return self.x0.grid

    def descriptor(self) -> dict[str, Any]:
        return {"kind": "parabolic_flow", "a_diff": self.a_diff, "p": self.p, "dt": self.dt,
                "rate": self.rate_model.label}


class EvolutionSystem:
    """Exponential-Euler propagator on a global step grid ``k * dt``.

    ``propagate(u, r, t)`` steps through every grid node in ``(r, t)``; the
    first and last steps are shortened when ``r`` or ``t`` is off the grid.
    Inside each step ``exp(h C(t_n))`` is split as the heat factor followed by
    the flow-conjugated ``exp(-h rate(t_n)/24 (g d)^4)``.
    """

    def __init__(self, prob: NoncommParabolicProblem, flow: FlowShiftGroup | None = None):
        self.prob = prob
        self.flow = flow or FlowShiftGroup(prob.grid, prob.g)
        self.rate = prob.rate_model.rate
        self.xi2 = prob.grid.xi ** 2
        self.clipped_mass = 0.0
        self.steps_taken = 0

    def nodes(self, r: float, t: float) -> np.ndarray:
        dt = self.prob.dt
        k0 = math.floor(r / dt + 1e-9) + 1
        k1 = math.ceil(t / dt - 1e-9)
        inner = np.arange(k0, k1) * dt
        inner = inner[(inner > r) & (inner < t)]
        return np.concatenate([[r], inner, [t]])

    def step(self, u: GridField, t0: float, t1: float) -> GridField:
        h = t1 - t0
        rate = float(self.rate(t0))
        v = np.fft.ifft(np.exp(-self.prob.a_diff * h * self.xi2) * np.fft.fft(u.samples))
        v = GridField(u.grid, v.real if u.is_real else v)
        if rate != 0.0:
            damp = MultiplierOperator(lambda xi: np.exp(-h * rate / 24.0 * np.asarray(xi) ** 4)
                                      + 0j)
            v = self.flow.apply_conjugated(damp, v)
        dw = self.prob.path(t1) - self.prob.path(t0)
        out, rep = self.flow.apply_report(dw, v)
        self.clipped_mass = max(self.clipped_mass, rep.clipped_mass)
        self.steps_taken += 1
        n0, n1 = u.norm(), out.norm()
        if not np.isfinite(n1) or n1 > GROWTH_GUARD * max(n0, 1e-300):
            raise NumericalGuardError(
                f"norm grew from {n0:.3e} to {n1:.3e} in one step at t={t0:.6g}",
                {"t": t0, "norm_before": n0, "norm_after": n1, "dt": h})
        return out

    def propagate(self, u: GridField, r: float, t: float) -> GridField:
        """``U(t, r) u``."""
        if t < r:
            raise ValueError("evolution systems only propagate forward")
        nodes = self.nodes(r, t)
        for t0, t1 in zip(nodes[:-1], nodes[1:]):
            u = self.step(u, t0, t1)
        return u

    def trajectory(self, times) -> SolutionTrajectory:
        times = np.asarray(times, dtype=np.float64)
        dt = self.prob.dt
        ratio = times / dt
        if np.any(np.abs(ratio - np.rint(ratio)) > 1e-9):
            raise ValueError("output times must be multiples of dt")
        if np.any(np.diff(times) < 0) or times[0] < 0:
            raise ValueError("output times must be non-decreasing and non-negative")
        u, cur = GridField(self.prob.grid, self.prob.x0.samples), 0.0
        states, norms = [], []
        for t in times:
            if t > cur:
                u, cur = self.propagate(u, cur, float(t)), float(t)
            states.append(u)
            norms.append(u.norm())
        meta = {"problem": self.prob.descriptor(), "path": self.prob.path.manifest(),
                "norms": norms, "clipped_mass": self.clipped_mass, "steps": self.steps_taken}
        return SolutionTrajectory(times, states, meta)

    def evolution_defect(self, u: GridField, r: float, m: float, t: float) -> float:
        """``|| U(t, r) u - U(t, m) U(m, r) u ||``."""
        direct = self.propagate(u, r, t)
        split = self.propagate(self.propagate(u, r, m), m, t)
        return (direct - split).norm()


def build_evolution_system(prob: NoncommParabolicProblem) -> EvolutionSystem:
    return EvolutionSystem(prob)


def solve_parabolic(prob: NoncommParabolicProblem, times) -> SolutionTrajectory:
    return build_evolution_system(prob).trajectory(times)


# -- hyperbolic ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HyperbolicProblem:
    """``A = 1/8 d^4 + i(d^4 + d^2 - g)``, ``B = d/dx``, ``p = 4``, rate ``c_4 = 3``."""

    g: GridField
    x0: GridField
    path: SamplePath
    dt: float
    p: int = 4
    b: float = 1.0

    def __post_init__(self):
        if self.p != 4 or self.b != 1.0:
            raise ValueError("the dispersive problem is defined for p = 4 and b = 1")
        if not 0 < self.dt <= 1:
            raise ValueError(f"dt must lie in (0, 1], got {self.dt}")

    @property
    def grid(self) -> SpectralGrid:
        return self.x0.grid

    @property
    def rate(self) -> float:
        return gaussian_abs_moment(self.p)

    def descriptor(self) -> dict[str, Any]:
        return {"kind": "hyperbolic", "p": self.p, "b": self.b, "dt": self.dt, "rate": self.rate}


def hyperbolic_C_symbol(prob: HyperbolicProblem, xi=None) -> np.ndarray:
    """Differential part of ``C = A - rate/4! B^4`` at ``xi``; the potential is excluded."""
    xi = prob.grid.xi if xi is None else np.asarray(xi, dtype=np.float64)
    d4 = (1j * xi) ** 4
    d2 = (1j * xi) ** 2
    a_sym = (1.0 / 8.0) * d4 + 1j * (d4 + d2)
    return a_sym - prob.rate / math.factorial(prob.p) * prob.b**4 * d4


def solve_hyperbolic(prob: HyperbolicProblem, times) -> SolutionTrajectory:
    """``X_{n+1} = shift(1, dw_n) schrodinger_step(g, dt) X_n`` on the grid ``k dt``."""
    re = float(np.abs(hyperbolic_C_symbol(prob).real).max())
    if re > 1e-12:
        raise NumericalGuardError(f"C is not skew: max |Re symbol| = {re:.3e}")
    times = np.asarray(times, dtype=np.float64)
    dt = prob.dt
    ratio = times / dt
    if np.any(np.abs(ratio - np.rint(ratio)) > 1e-9):
        raise ValueError("output times must be multiples of dt")
    ks = np.rint(ratio).astype(np.int64)
    u = GridField(prob.grid, prob.x0.samples)
    n0 = u.norm()
    states, drift = [], []
    k = 0
    for target in ks:
        while k < target:
            t0, t1 = k * dt, (k + 1) * dt
            u = schrodinger_step(prob.g, dt, u)
            u = shift_group(prob.b, prob.path(t1) - prob.path(t0)).apply(u)
            k += 1
        states.append(u)
        drift.append(abs(u.norm() - n0) / n0)
    meta = {"problem": prob.descriptor(), "path": prob.path.manifest(),
            "max_norm_drift": max(drift), "steps": int(k)}
    return SolutionTrajectory(times, states, meta)


# -- verification -------------------------------------------------------------


@dataclass(frozen=True)
class VerificationReport:
    levels: tuple[int, ...]
    residuals: np.ndarray
    t: float

    @property
    def final(self) -> float:
        return float(self.residuals[-1])

    def to_csv(self, file) -> None:
        np.savetxt(file, np.column_stack([self.levels, self.residuals]), delimiter=",",
                   header="level,residual", comments="", fmt=["%d", "%.17g"])


class _Structure:
    """Batched actions of A, B^k G_B(s) and C(t) on stacked states."""

    def __init__(self, prob):
        self.prob = prob
        if isinstance(prob, ScalarGeometricProblem):
            self.kind = "scalar"
            self.grid = None
        else:
            self.kind = "field"
            self.grid = prob.grid

    def _multiplier(self, sym_vals: np.ndarray, X: np.ndarray) -> np.ndarray:
        return np.fft.ifft(sym_vals * np.fft.fft(X, axis=-1), axis=-1)

    def A(self, t: np.ndarray, X: np.ndarray) -> np.ndarray:
        prob = self.prob
        if self.kind == "scalar":
            return prob.a * X
        xi = self.grid.xi
        if isinstance(prob, CommutativeProblem):
            return self._multiplier(prob.A.values(self.grid), X)
        if isinstance(prob, NoncommParabolicProblem):
            return self._multiplier(-prob.a_diff * xi**2, X)
        if isinstance(prob, HyperbolicProblem):
            sym = (1.0 / 8.0) * xi**4 + 1j * (xi**4 - xi**2)
            return self._multiplier(sym, X) - 1j * prob.g.samples.real * X
        raise TypeError(type(prob).__name__)

    def B_group(self, k: int, shift: np.ndarray, X: np.ndarray) -> np.ndarray:
        """``B^k G_B(shift) X`` row by row."""
        prob = self.prob
        if self.kind == "scalar":
            return prob.b**k * np.exp(prob.b * shift) * X
        xi = self.grid.xi
        if isinstance(prob, CommutativeProblem) and prob.noise is NoiseKind.SCALAR:
            return (prob.b**k * np.exp(prob.b * shift))[:, None] * X
        if isinstance(prob, NoncommParabolicProblem):
            fg = FlowShiftGroup(self.grid, prob.g) if not hasattr(self, "_fg") else self._fg
            self._fg = fg
            rows = []
            for s, x in zip(shift, X):
                u = GridField(self.grid, x)
                if s != 0.0:
                    u = fg.apply(float(s), u)
                rows.append(fg.generator_action(u, k).samples)
            return np.array(rows)
        b = prob.b
        sym = (b * 1j * xi)[None, :] ** k * np.exp(1j * xi[None, :] * (b * shift[:, None]))
        return self._multiplier(sym, X)

    def C(self, t: np.ndarray, X: np.ndarray) -> np.ndarray:
        prob = self.prob
        pf = math.factorial(prob.p)
        if self.kind == "scalar":
            V = prob.variation
            if isinstance(V, VariationEstimate):
                rate = variation_derivative(V)(t)
            else:
                h = 1e-6
                rate = (np.asarray(V(t + h)) - np.asarray(V(np.maximum(t - h, 0.0)))) / (
                    t + h - np.maximum(t - h, 0.0))
            return (prob.a - rate * prob.b**prob.p / pf) * X
        if isinstance(prob, HyperbolicProblem):
            rate = np.full(t.shape, prob.rate)
        else:
            rate = np.array([prob.rate_model.rate(float(s)) for s in t])
        bp = self.B_group(prob.p, np.zeros(t.shape), X)
        return self.A(t, X) - (rate / pf)[:, None] * bp


def strong_solution_functional(traj: SolutionTrajectory, prob) -> SmoothFunctional:
    """``f(t, x) = G_B(x - w_0) v(t)`` with ``v(t) = G_B(w_0 - w_t) X(t)``.

    Derivatives: ``d_x^k f = B^k G_B(x - w_0) v(t) = B^k G_B(x - w_t) X(t)`` and
    ``d_t f = G_B(x - w_t) C(t) X(t)``.  Only trajectory times can be evaluated.
    """
    S = _Structure(prob)
    X = traj.as_array()
    path = prob.path

    def rows(t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        idx = np.searchsorted(traj.times, t)
        idx = np.clip(idx, 0, traj.times.size - 1)
        if np.any(traj.times[idx] != t):
            missing = t[traj.times[idx] != t][:3]
            raise ValueError(f"trajectory has no state at t={missing.tolist()}")
        return t, X[idx]

    def shift(t, x):
        return np.atleast_1d(np.asarray(x, dtype=np.float64)) - np.asarray(path(t))

    def value(t, x):
        t, Xt = rows(t)
        return S.B_group(0, shift(t, x), Xt)

    def dt(t, x):
        t, Xt = rows(t)
        return S.B_group(0, shift(t, x), S.C(t, Xt))

    def dxk(k):
        def f(t, x):
            t, Xt = rows(t)
            return S.B_group(k, shift(t, x), Xt)

        return f

    if S.kind == "scalar":
        norm = lambda v: float(np.abs(v))  # noqa: E731
    else:
        dx = S.grid.dx
        norm = lambda v: float(math.sqrt(dx) * np.linalg.norm(np.ravel(v)))  # noqa: E731
    return SmoothFunctional(prob.p, value, dt, [dxk(k) for k in range(1, prob.p + 1)],
                            norm=norm, name="strong_solution")


def verify_strong_solution(traj: SolutionTrajectory, prob, seq: PartitionSequence,
                           levels=None, t: float = 1.0) -> VerificationReport:
    """Relative defect ``|X(t) - x0 - int_0^t AX dr - sum_n| / (1 + |X(t)|)`` per level.

    ``sum_n`` is the compensated Riemann sum of the strong-solution functional
    along level n; the drift integral uses the trapezoid rule on the finest
    level.  The trajectory must contain every finest-level point up to ``t``.
    """
    levels = tuple(seq.levels if levels is None else levels)
    finest = make_partition(seq, max(levels)).points
    nodes = np.append(finest[finest < t], t)
    idx = np.searchsorted(traj.times, nodes)
    idx = np.clip(idx, 0, traj.times.size - 1)
    if np.any(traj.times[idx] != nodes):
        raise ValueError("trajectory is missing states at finest-level partition points")
    S = _Structure(prob)
    X = traj.as_array()[idx]
    AX = S.A(nodes, X)
    drift = np.trapezoid(AX, nodes, axis=0)
    F = strong_solution_functional(traj, prob)
    x0 = X[0]
    Xt = X[-1]
    lhs = Xt - x0 - drift
    scale = 1.0 + F.norm(Xt)
    res = []
    for n in levels:
        cs = compensated_sum(F, prob.path, make_partition(seq, n), t)
        res.append(F.norm(lhs - cs) / scale)
    return VerificationReport(levels, np.array(res), t)
