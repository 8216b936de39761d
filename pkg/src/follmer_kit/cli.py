"""Config-driven experiment runner.

Usage::

    follmer-kit run CONFIG.json [--out DIR] [--threads N] [--seed S]
    follmer-kit report DIR [DIR ...] [--out FILE]

Exit codes: 0 success, 1 failed in-config assertion, 2 config error,
3 numerical guard (norm blow-up or mass clipped at the box edge).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Annotated, Any, Callable, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator, model_validator

from . import __version__
from .follmer import (
    follmer_integral,
    ito_follmer_residuals,
    compensated_sum,
    monomial_functional,
    polynomial_functional,
    time_linear_functional,
)
from .operators import (
    GridField,
    SpectralGrid,
    bump_g,
    derivative_operator,
)
from .oracles import heat_kernel_transport, random_sign_series_moment
from .pathgen import (
    PartitionSequence,
    SamplePath,
    gen_deterministic,
    gen_fbm,
    gen_takagi_landsberg,
    gen_wiener,
    make_partition,
)
from .solvers import (
    CommutativeProblem,
    HyperbolicProblem,
    NoncommParabolicProblem,
    NumericalGuardError,
    ScalarGeometricProblem,
    build_evolution_system,
    hyperbolic_C_symbol,
    solve_commutative,
    solve_hyperbolic,
    solve_parabolic,
    solve_scalar_geometric,
    verify_strong_solution,
)
from .variation import (
    DEFAULT_WINDOW,
    gaussian_abs_moment,
    variation_derivative,
    variation_limit,
)

THREADS_ENV = "FOLLMER_KIT_THREADS"
CLIP_TOL = 1e-6

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_GUARD = 0, 1, 2, 3


# -- configuration models -----------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _even_p(p: int) -> int:
    if p < 2 or p % 2:
        raise ValueError("p must be an even integer >= 2")
    return p


class PathSpec(_Strict):
    generator: Literal["fbm", "wiener", "takagi", "linear", "constant", "monomial"]
    hurst: Optional[float] = Field(None, gt=0.0, lt=1.0)
    level: int = Field(14, ge=2, le=24)
    depth: Optional[int] = Field(None, ge=0)
    param: float = 1.0

    @model_validator(mode="after")
    def _needs_hurst(self):
        if self.generator in ("fbm", "takagi") and self.hurst is None:
            raise ValueError(f"generator {self.generator!r} requires hurst")
        if self.depth is not None and self.depth > self.level:
            raise ValueError("depth must not exceed level")
        return self


class PartitionSpec(_Strict):
    kind: Literal["dyadic", "equidistant"] = "dyadic"
    levels: list[int] = Field(min_length=1)

    @field_validator("levels")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("levels must be strictly increasing")
        if v[0] < 0:
            raise ValueError("levels must be non-negative")
        return v


class AssertionSpec(_Strict):
    name: str
    stat: str
    op: Literal["le", "lt", "ge", "gt", "close", "true"]
    target: Optional[float] = None
    rel_tol: float = Field(0.0, ge=0.0)
    abs_tol: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _target(self):
        if self.op != "true" and self.target is None:
            raise ValueError(f"op {self.op!r} needs a target")
        return self


class GridSpec(_Strict):
    N: int = Field(1024, ge=4)
    L_dom: float = Field(10.0, gt=0.0)

    @field_validator("N")
    @classmethod
    def _pow2(cls, v):
        if v & (v - 1):
            raise ValueError("N must be a power of two")
        return v


class FieldSpec(_Strict):
    kind: Literal["gaussian"] = "gaussian"
    center: float = 0.0
    sigma: float = Field(0.5, gt=0.0)
    amplitude: float = 1.0
    wavenumber: float = 0.0


class _Base(_Strict):
    seed: int = Field(0, ge=0, lt=2**63)
    n_seeds: int = Field(1, ge=1, le=100_000)
    output_dir: Optional[str] = None
    assertions: list[AssertionSpec] = []


class GenPathConfig(_Base):
    experiment: Literal["GenPath"]
    path: PathSpec


class TakagiOracleSpec(_Strict):
    draws: int = Field(10**6, ge=1000)
    seed: int = Field(0, ge=0)
    start: int = Field(0, ge=0)


class VariationSpec(_Strict):
    p: int
    window: int = Field(DEFAULT_WINDOW, ge=1)
    eval_times: list[float] = [0.25, 0.5, 1.0]
    fit_range: tuple[float, float] = (0.1, 1.0)
    derivative_range: tuple[float, float] = (0.1, 0.9)
    decrease_from: Optional[int] = None
    takagi_oracle: Optional[TakagiOracleSpec] = None

    _p = field_validator("p")(classmethod(lambda cls, v: _even_p(v)))

    @field_validator("eval_times")
    @classmethod
    def _times(cls, v):
        if any(not 0.0 <= t <= 1.0 for t in v):
            raise ValueError("eval_times must lie in [0, 1]")
        return v


class VariationConfig(_Base):
    experiment: Literal["Variation"]
    path: PathSpec
    partition: PartitionSpec
    variation: VariationSpec


class FunctionalSpec(_Strict):
    kind: Literal["monomial", "polynomial", "time_linear", "random_polynomials"]
    degree: int = Field(2, ge=0)
    coeffs: Optional[list[float]] = None
    count: int = Field(20, ge=1)


class IntegrateSpec(_Strict):
    p: int
    functional: FunctionalSpec
    t: float = Field(1.0, gt=0.0, le=1.0)
    residual_tol: float = Field(5e-2, gt=0.0)
    exactness_tol: float = Field(1e-10, gt=0.0)

    _p = field_validator("p")(classmethod(lambda cls, v: _even_p(v)))


class IntegrateConfig(_Base):
    experiment: Literal["Integrate"]
    path: PathSpec
    partition: PartitionSpec
    integrate: IntegrateSpec


class VerifySpec(_Strict):
    levels: Optional[list[int]] = None
    t: float = Field(1.0, gt=0.0, le=1.0)
    residual_tol: float = Field(5e-2, gt=0.0)


class GeometricSpec(_Strict):
    a: float
    b: float
    p: int
    variation: Literal["empirical", "theoretical"] = "empirical"

    _p = field_validator("p")(classmethod(lambda cls, v: _even_p(v)))


class SolveGeometricConfig(_Base):
    experiment: Literal["SolveGeometric"]
    path: PathSpec
    partition: PartitionSpec
    geometric: GeometricSpec
    verify: Optional[VerifySpec] = None


RateSpec = Union[float, Literal["median", "derivative", "variation", "polyfit", "theoretical"]]


class CommutativeSpec(_Strict):
    a: float = Field(1.0, gt=0.0)
    noise: Literal["scalar", "shift"]
    b: float
    p: int
    rate: RateSpec = "median"
    window: int = Field(DEFAULT_WINDOW, ge=1)
    times: list[float] = [0.1, 0.5, 1.0]
    closed_form_check: bool = False

    _p = field_validator("p")(classmethod(lambda cls, v: _even_p(v)))


class SolveCommutativeConfig(_Base):
    experiment: Literal["SolveCommutative"]
    path: PathSpec
    partition: PartitionSpec
    grid: GridSpec = GridSpec()
    x0: FieldSpec = FieldSpec()
    commutative: CommutativeSpec
    verify: Optional[VerifySpec] = None

    @model_validator(mode="after")
    def _regime(self):
        c = self.commutative
        if c.noise == "shift" and c.p == 2 and not c.a > c.b**2 / 2:
            raise ValueError("shift noise with p = 2 requires a > b^2/2")
        if c.noise == "shift" and c.p % 4 != 0 and c.p != 2:
            raise ValueError("shift noise requires p = 2 or p divisible by 4")
        if c.closed_form_check and not (c.noise == "shift" and c.p == 2):
            raise ValueError("closed_form_check applies to shift noise with p = 2")
        return self


class FlowSpec(_Strict):
    kind: Literal["constant", "bump"] = "bump"
    value: float = Field(1.0, gt=0.0)
    amplitude: float = 0.3
    width: float = Field(2.0, gt=0.0)
    base: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _positive(self):
        if self.kind == "bump" and abs(self.amplitude) >= self.base:
            raise ValueError("bump g must stay positive: |amplitude| < base")
        return self


class ParabolicSpec(_Strict):
    g: FlowSpec = FlowSpec()
    a_diff: float = Field(1.0, ge=0.0)
    rate: RateSpec = "polyfit"
    window: int = Field(DEFAULT_WINDOW, ge=1)
    dt: float = Field(1e-2, gt=0.0, le=1.0)
    order_dts: list[float] = []
    refinement: bool = False
    defect_triples: int = Field(0, ge=0)
    defect_level: int = Field(10, ge=1, le=20)
    defect_factor: float = Field(5.0, gt=0.0)


class SolveParabolicConfig(_Base):
    experiment: Literal["SolveParabolic"]
    path: PathSpec
    partition: PartitionSpec
    grid: GridSpec = GridSpec(N=256)
    x0: FieldSpec = FieldSpec(sigma=1.0)
    parabolic: ParabolicSpec

    @model_validator(mode="after")
    def _order_needs_constant(self):
        if self.parabolic.order_dts and self.parabolic.g.kind != "constant":
            raise ValueError("order_dts compares against the closed form and needs constant g")
        return self


class HyperbolicSpec(_Strict):
    potential_amplitude: float = 0.5
    potential_width: float = Field(1.0, gt=0.0)
    dt: float = Field(1e-3, gt=0.0, le=1.0)
    n_steps: int = Field(1000, ge=1)
    report_every: int = Field(250, ge=1)


class SolveHyperbolicConfig(_Base):
    experiment: Literal["SolveHyperbolic"]
    path: PathSpec
    grid: GridSpec = GridSpec(N=512)
    x0: FieldSpec = FieldSpec(sigma=0.7, wavenumber=1.0)
    hyperbolic: HyperbolicSpec = HyperbolicSpec()


class VerifyConfig(_Base):
    experiment: Literal["Verify"]
    problem: Literal["geometric", "commutative"]
    path: PathSpec
    partition: PartitionSpec
    grid: GridSpec = GridSpec(N=256)
    x0: FieldSpec = FieldSpec(sigma=1.0)
    geometric: Optional[GeometricSpec] = None
    commutative: Optional[CommutativeSpec] = None
    verify: VerifySpec = VerifySpec()

    @model_validator(mode="after")
    def _block(self):
        if getattr(self, self.problem) is None:
            raise ValueError(f"problem {self.problem!r} needs a {self.problem!r} block")
        return self


class MonteCarloConfig(_Base):
    experiment: Literal["MonteCarlo"]
    inner: dict[str, Any]

    @field_validator("inner")
    @classmethod
    def _inner(cls, v):
        if v.get("experiment") == "MonteCarlo":
            raise ValueError("MonteCarlo experiments cannot be nested")
        _SINGLE.validate_python(v)
        return v


_Single = Annotated[
    Union[GenPathConfig, VariationConfig, IntegrateConfig, SolveGeometricConfig,
          SolveCommutativeConfig, SolveParabolicConfig, SolveHyperbolicConfig, VerifyConfig],
    Field(discriminator="experiment"),
]
_SINGLE = TypeAdapter(_Single)
ExperimentConfig = Annotated[Union[_Single, MonteCarloConfig], Field(discriminator="experiment")]
_CONFIG = TypeAdapter(ExperimentConfig)


def parse_config(data: dict[str, Any]):
    return _CONFIG.validate_python(data)


# -- building blocks ----------------------------------------------------------


def make_path(spec: PathSpec, seed: int) -> SamplePath:
    if spec.generator == "fbm":
        return gen_fbm(spec.hurst, spec.level, seed)
    if spec.generator == "wiener":
        return gen_wiener(spec.level, seed)
    if spec.generator == "takagi":
        return gen_takagi_landsberg(spec.hurst, spec.depth, spec.level)
    return gen_deterministic(spec.generator, spec.level, spec.param)


def make_sequence(spec: PartitionSpec, path: SamplePath) -> PartitionSequence:
    if spec.kind == "dyadic" and spec.levels[-1] > path.level:
        raise ConfigError("partition.levels", f"finest level {spec.levels[-1]} exceeds path level "
                          f"{path.level}")
    return PartitionSequence(spec.kind, spec.levels)


def make_grid(spec: GridSpec) -> SpectralGrid:
    return SpectralGrid(spec.N, spec.L_dom)


def make_field(grid: SpectralGrid, spec: FieldSpec) -> GridField:
    u = grid.gaussian(spec.center, spec.sigma, spec.amplitude)
    if spec.wavenumber:
        return GridField(grid, u.samples * np.exp(1j * spec.wavenumber * grid.x))
    return u


def gaussian_profile(spec: FieldSpec) -> Callable:
    return lambda x: spec.amplitude * np.exp(-((x - spec.center) ** 2) / (2.0 * spec.sigma**2))


def make_g(spec: FlowSpec) -> Callable:
    if spec.kind == "constant":
        v = spec.value
        return lambda x: np.full(np.shape(x), v)
    return bump_g(spec.amplitude, spec.width, spec.base)


def _rate(rate, p: int):
    return gaussian_abs_moment(p) if rate == "theoretical" else rate


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


def _tkey(t: float) -> str:
    return f"{t:g}"


# -- experiment runners (one seed each) ---------------------------------------
# Each returns a flat dict of scalar statistics; files go to ``outdir`` if given.


def run_genpath(cfg: GenPathConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    if outdir:
        path.write(outdir)
    return {"final_value": float(path.values[-1]), "max_abs": float(np.abs(path.values).max()),
            "clipped_eigenvalues": int(path.params.get("clipped_eigenvalues", 0))}


def _linear_fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def run_variation(cfg: VariationConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    seq = make_sequence(cfg.partition, path)
    v = cfg.variation
    est = variation_limit(path, seq, v.p)
    stats: dict[str, Any] = {f"limit_t{_tkey(t)}": est(t) for t in v.eval_times}
    stats["total"] = float(est.limit_values[-1])
    for n, d in zip(est.levels, est.diagnostics):
        stats[f"diag_L{n}"] = float(d)
    mono = all(np.all(np.diff(c.values) >= 0) and c.values[0] == 0.0 for c in est.cumulative)
    stats["monotone"] = bool(mono)
    lo, hi = v.fit_range
    sel = (est.limit_grid >= lo) & (est.limit_grid <= hi)
    slope, intercept, r2 = _linear_fit(est.limit_grid[sel], est.limit_values[sel])
    stats.update(slope=slope, intercept=intercept, r2=r2)
    der = variation_derivative(est, v.window)
    lo, hi = v.derivative_range
    sel = (der.times >= lo) & (der.times <= hi)
    stats["derivative_mean"] = float(der.values[sel].mean())
    stats["derivative_median"] = der.median()
    if outdir:
        est.write_csv(outdir)
        np.savetxt(outdir / "derivative.csv", np.column_stack([der.times, der.values]),
                   delimiter=",", header="t,derivative", comments="", fmt="%.17g")
    return stats


def _aggregate_variation(cfg: VariationConfig, summary: dict) -> None:
    v = cfg.variation
    levels = cfg.partition.levels
    start = v.decrease_from if v.decrease_from is not None else levels[0]
    means = [summary["mean"][f"diag_L{n}"] for n in levels if n >= start]
    summary["diagnostics_decreasing"] = bool(all(b < a for a, b in zip(means, means[1:])))
    if v.takagi_oracle is not None:
        o = v.takagi_oracle
        hurst = cfg.path.hurst
        oracle = random_sign_series_moment(hurst, v.p, o.draws, o.seed, o.start)
        summary["oracle_slope"] = oracle
        summary["slope_rel_err"] = abs(summary["mean"]["slope"] - oracle) / oracle
        summary["oracle_slope_from_n1"] = random_sign_series_moment(hurst, v.p, o.draws, o.seed,
                                                                    1)


def _random_polynomials(rng: np.random.Generator, degree: int, count: int) -> list[np.ndarray]:
    return [rng.standard_normal(degree + 1) for _ in range(count)]


def run_integrate(cfg: IntegrateConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    seq = make_sequence(cfg.partition, path)
    s = cfg.integrate
    fs = s.functional
    if fs.kind == "random_polynomials":
        rng = np.random.default_rng([seed, 7])
        worst = 0.0
        w0, wt = path(0.0), path(s.t)
        for coeffs in _random_polynomials(rng, s.p - 1, fs.count):
            F = polynomial_functional(coeffs, s.p)
            exact = float(F.value(s.t, np.array(wt)) - F.value(0.0, np.array(w0)))
            for n in seq.levels:
                cs = compensated_sum(F, path, make_partition(seq, n), s.t)
                worst = max(worst, abs(cs - exact) / (1.0 + abs(exact)))
        return {"exactness_error": worst, "exact": bool(worst <= s.exactness_tol)}

    if fs.kind == "monomial":
        F = monomial_functional(fs.degree, s.p)
    elif fs.kind == "polynomial":
        if not fs.coeffs:
            raise ConfigError("integrate.functional.coeffs", "polynomial functional needs coeffs")
        F = polynomial_functional(fs.coeffs, s.p)
    else:
        F = time_linear_functional(s.p)
    est = variation_limit(path, seq, s.p)
    table = ito_follmer_residuals(F, path, seq, est, s.t, relative=True)
    res = follmer_integral(F, path, seq, s.t)
    final, coarse = float(table.residuals[-1]), float(table.residuals[0])
    stats = {"integral": float(res.value), "converged": bool(res.converged),
             "residual_final": final, "residual_coarse": coarse,
             "improved": bool(final < coarse), "ok": bool(final <= s.residual_tol and final < coarse)}
    for n, r in zip(table.levels, table.residuals):
        stats[f"residual_L{n}"] = float(r)
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
        table.to_csv(outdir / "residuals.csv")
    return stats


def _verify_stats(report, tol: float) -> dict:
    stats = {f"residual_L{n}": float(r) for n, r in zip(report.levels, report.residuals)}
    final, coarse = report.final, float(report.residuals[0])
    stats.update(residual_final=final, residual_coarse=coarse, ok=bool(final <= tol))
    return stats


def _geometric(spec: GeometricSpec, path: SamplePath, seq: PartitionSequence):
    est = variation_limit(path, seq, spec.p)
    if spec.variation == "theoretical":
        cp = gaussian_abs_moment(spec.p)
        variation = lambda t: cp * np.asarray(t)  # noqa: E731
    else:
        variation = est
    traj = solve_scalar_geometric(spec.a, spec.b, spec.p, path, variation, times=est.limit_grid)
    return ScalarGeometricProblem(spec.a, spec.b, spec.p, path, variation), traj


def run_solve_geometric(cfg: SolveGeometricConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    seq = make_sequence(cfg.partition, path)
    prob, traj = _geometric(cfg.geometric, path, seq)
    stats = {"Y_final": float(traj.states[-1])}
    if cfg.verify is not None:
        report = verify_strong_solution(traj, prob, seq, cfg.verify.levels, cfg.verify.t)
        stats.update(_verify_stats(report, cfg.verify.residual_tol))
        if outdir:
            outdir.mkdir(parents=True, exist_ok=True)
            report.to_csv(outdir / "residuals.csv")
    if outdir:
        traj.write(outdir)
    return stats


def _commutative(cfg, path: SamplePath, seq: PartitionSequence, times):
    c = cfg.commutative
    grid = make_grid(cfg.grid)
    x0 = make_field(grid, cfg.x0)
    est = variation_limit(path, seq, c.p)
    A = derivative_operator(2, c.a)
    prob = CommutativeProblem(A, c.noise, c.b, c.p, x0, path, est, _rate(c.rate, c.p), c.window)
    return prob, solve_commutative(prob, times)


def run_solve_commutative(cfg: SolveCommutativeConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    seq = make_sequence(cfg.partition, path)
    c = cfg.commutative
    times = sorted(set([0.0, *c.times]))
    if cfg.verify is not None:
        vlev = cfg.verify.levels or cfg.partition.levels
        times = sorted(set(times) | set(make_partition(seq, max(vlev)).points.tolist()))
    prob, traj = _commutative(cfg, path, seq, times)
    stats: dict[str, Any] = {"rate": float(prob.rate_model.rate(0.0))}
    if c.closed_form_check:
        rate = float(prob.rate_model.rate(0.0))
        cdiff = c.a - rate * c.b**2 / 2.0
        profile = gaussian_profile(cfg.x0)
        errs = []
        for t in c.times:
            if t == 0.0:
                continue
            ref = heat_kernel_transport(profile, prob.grid.x, t, cdiff,
                                        c.b * (path(t) - path(0.0)))
            err = float(np.abs(traj.at(t).samples - ref).max())
            stats[f"sup_err_t{_tkey(t)}"] = err
            errs.append(err)
        stats["max_sup_err"] = max(errs)
    if cfg.verify is not None:
        report = verify_strong_solution(traj, prob, seq, cfg.verify.levels, cfg.verify.t)
        stats.update(_verify_stats(report, cfg.verify.residual_tol))
    for t in c.times:
        stats[f"norm_t{_tkey(t)}"] = traj.at(t).norm()
    if outdir:
        out = [traj.index_of(t) for t in [0.0, *c.times]]
        from .solvers import SolutionTrajectory

        SolutionTrajectory(traj.times[out], [traj.states[i] for i in out], traj.meta).write(outdir)
    return stats


def run_solve_parabolic(cfg: SolveParabolicConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    seq = make_sequence(cfg.partition, path)
    s = cfg.parabolic
    grid = make_grid(cfg.grid)
    x0 = make_field(grid, cfg.x0)
    est = variation_limit(path, seq, 4)
    g = make_g(s.g)
    rate = _rate(s.rate, 4)

    def problem(dt):
        return NoncommParabolicProblem(g, s.a_diff, x0, path, est, dt, rate=rate, window=s.window)

    def run(dt):
        es = build_evolution_system(problem(dt))
        traj = es.trajectory([0.0, 1.0])
        if es.clipped_mass > CLIP_TOL:
            raise NumericalGuardError(f"flow moved {es.clipped_mass:.2e} of the mass out of the box",
                                      {"clipped_mass": es.clipped_mass})
        return traj

    base = run(s.dt)
    stats: dict[str, Any] = {"norm_final": base.states[-1].norm(),
                             "norm_growth": base.states[-1].norm() / x0.norm()}
    if s.order_dts:
        b = s.g.value
        cp = CommutativeProblem(derivative_operator(2, s.a_diff), "shift", b, 4, x0, path, est,
                                rate, s.window)
        ref = solve_commutative(cp, [1.0]).states[0]
        dts = np.array(s.order_dts)
        errs = np.array([(run(dt).states[-1] - ref).norm() for dt in dts])
        for dt, e in zip(dts, errs):
            stats[f"err_dt{_tkey(dt)}"] = float(e)
        stats["order"] = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    if s.refinement:
        h = s.dt
        e1 = (run(h).states[-1] - run(h / 4).states[-1]).norm()
        e2 = (run(h / 2).states[-1] - run(h / 8).states[-1]).norm()
        stats["refinement_ratio"] = float(e1 / e2)
    if s.defect_triples:
        es = build_evolution_system(problem(s.dt))
        rng = np.random.default_rng([seed, 11])
        worst = 0.0
        scale = 2**s.defect_level
        for _ in range(s.defect_triples):
            r, m, t = np.sort(rng.choice(scale + 1, size=3, replace=False)) / scale
            worst = max(worst, es.evolution_defect(x0, float(r), float(m), float(t)))
        stats["max_defect"] = worst
        stats["defect_over_dt"] = worst / s.dt
        stats["defect_ok"] = bool(worst <= s.defect_factor * s.dt)
    if outdir:
        base.write(outdir)
    return stats


def run_solve_hyperbolic(cfg: SolveHyperbolicConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    h = cfg.hyperbolic
    grid = make_grid(cfg.grid)
    x0 = make_field(grid, cfg.x0)
    g = GridField(grid, h.potential_amplitude * np.exp(-(grid.x**2) / h.potential_width**2))
    prob = HyperbolicProblem(g, x0, path, h.dt)
    ks = list(range(h.report_every, h.n_steps + 1, h.report_every))
    if not ks or ks[-1] != h.n_steps:
        ks.append(h.n_steps)
    times = np.array(ks) * h.dt
    if times[-1] > 1.0 + 1e-12:
        raise ConfigError("hyperbolic.n_steps", "n_steps * dt must not exceed 1")
    traj = solve_hyperbolic(prob, times)
    n0 = x0.norm()
    drift = float(max(abs(s.norm() - n0) / n0 for s in traj.states))
    stats = {"max_re_symbol": float(np.abs(hyperbolic_C_symbol(prob).real).max()),
             "max_norm_drift": drift, "steps": int(traj.meta["steps"]),
             "norm_final": traj.states[-1].norm()}
    if outdir:
        traj.write(outdir)
    return stats


def run_verify(cfg: VerifyConfig, seed: int, outdir: Path | None) -> dict:
    path = make_path(cfg.path, seed)
    seq = make_sequence(cfg.partition, path)
    v = cfg.verify
    if cfg.problem == "geometric":
        prob, traj = _geometric(cfg.geometric, path, seq)
    else:
        vlev = v.levels or cfg.partition.levels
        times = make_partition(seq, max(vlev)).points
        prob, traj = _commutative(cfg, path, seq, times)
    report = verify_strong_solution(traj, prob, seq, v.levels, v.t)
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
        report.to_csv(outdir / "residuals.csv")
    return _verify_stats(report, v.residual_tol)


RUNNERS: dict[str, Callable] = {
    "GenPath": run_genpath,
    "Variation": run_variation,
    "Integrate": run_integrate,
    "SolveGeometric": run_solve_geometric,
    "SolveCommutative": run_solve_commutative,
    "SolveParabolic": run_solve_parabolic,
    "SolveHyperbolic": run_solve_hyperbolic,
    "Verify": run_verify,
}

AGGREGATORS: dict[str, Callable] = {"Variation": _aggregate_variation}

# First statistic present in the summary is the headline.
HEADLINE = {
    "GenPath": ("mean.final_value",),
    "Variation": ("slope_rel_err", "mean.total"),
    "Integrate": ("mean.residual_final", "max.exactness_error"),
    "SolveGeometric": ("mean.residual_final", "mean.Y_final"),
    "SolveCommutative": ("max.max_sup_err", "mean.residual_final", "mean.rate"),
    "SolveParabolic": ("mean.order", "max.max_defect", "mean.norm_final"),
    "SolveHyperbolic": ("max.max_norm_drift",),
    "Verify": ("mean.residual_final",),
}


def headline(experiment: str, summary: dict) -> tuple[str, Any]:
    for stat in HEADLINE[experiment]:
        try:
            return stat, lookup(summary, stat)
        except KeyError:
            continue
    return "", None


# -- aggregation, assertions, manifest ----------------------------------------


def aggregate(per_seed: list[dict]) -> dict:
    """Mean/min/max of numeric statistics and counts/fractions of boolean ones, in seed order."""
    out: dict[str, Any] = {"mean": {}, "min": {}, "max": {}, "std": {}, "count": {}, "fraction": {}}
    keys = list(per_seed[0])
    n = len(per_seed)
    for k in keys:
        vals = [s[k] for s in per_seed]
        if all(isinstance(v, bool) for v in vals):
            c = sum(vals)
            out["count"][k] = c
            out["fraction"][k] = c / n
        else:
            arr = np.array(vals, dtype=np.float64)
            total = 0.0
            for v in arr:  # fixed summation order
                total += float(v)
            mean = total / n
            out["mean"][k] = mean
            out["min"][k] = float(arr.min())
            out["max"][k] = float(arr.max())
            out["std"][k] = float(math.sqrt(sum((float(v) - mean) ** 2 for v in arr) / n))
    out["n_seeds"] = n
    return out


def lookup(summary: dict, stat: str):
    node: Any = summary
    if stat in node:
        return node[stat]
    head, _, rest = stat.partition(".")
    if head in node and rest:
        return lookup(node[head], rest)
    raise KeyError(stat)


def evaluate_assertion(a: AssertionSpec, summary: dict) -> dict:
    try:
        value = lookup(summary, a.stat)
    except KeyError:
        return {"name": a.name, "stat": a.stat, "passed": False, "value": None,
                "message": f"statistic {a.stat!r} not found"}
    if a.op == "true":
        passed = bool(value)
    else:
        value = float(value)
        tol = a.abs_tol + a.rel_tol * abs(a.target)
        passed = {
            "le": value <= a.target + tol, "lt": value < a.target,
            "ge": value >= a.target - tol, "gt": value > a.target,
            "close": abs(value - a.target) <= tol,
        }[a.op]
    return {"name": a.name, "stat": a.stat, "op": a.op, "target": a.target,
            "rel_tol": a.rel_tol, "abs_tol": a.abs_tol, "value": value, "passed": bool(passed)}


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(outdir: Path, manifest: dict) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    write_atomic(outdir / "manifest.json", text + "\n")


def key_params(cfg) -> dict:
    out: dict[str, Any] = {}
    path = getattr(cfg, "path", None)
    if path is not None:
        out["generator"] = path.generator
        if path.hurst is not None:
            out["hurst"] = path.hurst
        out["level"] = path.level
    for block in ("variation", "integrate", "geometric", "commutative"):
        b = getattr(cfg, block, None)
        if b is not None and hasattr(b, "p"):
            out["p"] = b.p
    return out


def execute(cfg, threads: int, outdir: Path, timing: dict) -> tuple[dict, list[dict], dict]:
    """Run every seed and aggregate; returns (summary, per_seed, echo of the effective config)."""
    inner = cfg
    if isinstance(cfg, MonteCarloConfig):
        data = dict(cfg.inner, seed=cfg.seed, n_seeds=cfg.n_seeds)
        inner = _SINGLE.validate_python(data)
    runner = RUNNERS[inner.experiment]
    seeds = [inner.seed + i for i in range(inner.n_seeds)]

    def one(i_seed):
        i, s = i_seed
        return runner(inner, s, outdir / f"seed_{s}" if i == 0 else None)

    t0 = time.perf_counter()
    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_seed = list(pool.map(one, enumerate(seeds)))
    else:
        per_seed = [one(x) for x in enumerate(seeds)]
    timing["run_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    summary = aggregate(per_seed)
    agg = AGGREGATORS.get(inner.experiment)
    if agg:
        agg(inner, summary)
    timing["aggregate_seconds"] = time.perf_counter() - t0
    for s, row in zip(seeds, per_seed):
        row["seed"] = s
    return summary, per_seed, inner


def write_per_seed(outdir: Path, per_seed: list[dict]) -> None:
    keys = ["seed"] + [k for k in per_seed[0] if k != "seed"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in per_seed:
        w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])
    write_atomic(outdir / "per_seed.csv", buf.getvalue())


def _error_field(err: ValidationError) -> str:
    loc = list(err.errors()[0]["loc"])
    if len(loc) > 1 and isinstance(loc[0], str) and loc[0][0].isupper():
        loc = loc[1:]  # discriminator tag
    return ".".join(str(x) for x in loc) or "<root>"


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def cmd_run(args) -> int:
    config_path = Path(args.config)
    threads = resolve_threads(args.threads)
    base_manifest: dict[str, Any] = {"tool": "follmer-kit", "version": __version__,
                                     "config_file": config_path.name}
    timing: dict[str, Any] = {"threads": threads}
    default_out = Path(args.out) if args.out else Path("follmer-kit-out") / config_path.stem

    def fail_config(field: str, message: str, raw=None) -> int:
        out = default_out
        if raw is not None and not args.out and isinstance(raw.get("output_dir"), str):
            out = Path(raw["output_dir"])
        m = dict(base_manifest, status="config_error", config=raw,
                 error={"type": "config_error", "field": field, "message": message},
                 timing=timing)
        write_manifest(out, m)
        print(f"config error in {field}: {message}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        raw = json.loads(config_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return fail_config("<file>", str(exc))
    if not isinstance(raw, dict):
        return fail_config("<root>", "config must be a JSON object")
    if args.seed is not None:
        raw = dict(raw, seed=args.seed)
    try:
        cfg = parse_config(raw)
    except ValidationError as exc:
        return fail_config(_error_field(exc), exc.errors()[0]["msg"], raw)

    outdir = Path(args.out) if args.out else Path(cfg.output_dir or default_out)
    echo = cfg.model_dump(mode="json")
    echo.pop("output_dir", None)
    manifest = dict(base_manifest, experiment=cfg.experiment, seed=cfg.seed,
                    n_seeds=cfg.n_seeds, config=echo, key_params={})
    t_start = time.perf_counter()
    try:
        summary, per_seed, inner = execute(cfg, threads, outdir, timing)
    except ConfigError as exc:
        return fail_config(exc.field, str(exc), raw)
    except NumericalGuardError as exc:
        timing["total_seconds"] = time.perf_counter() - t_start
        manifest.update(status="numerical_guard", timing=timing,
                        error={"type": "numerical_guard", "message": str(exc),
                               "diagnostics": exc.diagnostics})
        write_manifest(outdir, manifest)
        print(f"numerical guard: {exc}", file=sys.stderr)
        return EXIT_GUARD

    write_per_seed(outdir, per_seed)
    results = [evaluate_assertion(a, summary) for a in cfg.assertions]
    ok = all(r["passed"] for r in results)
    head_stat, head_value = headline(inner.experiment, summary)
    timing["total_seconds"] = time.perf_counter() - t_start
    manifest.update(status="ok" if ok else "assertion_failed", summary=summary,
                    per_seed=per_seed, assertions=results, key_params=key_params(inner),
                    headline={"stat": head_stat, "value": head_value},
                    inner_experiment=inner.experiment, error=None, timing=timing)
    if not ok:
        failed = [r["name"] for r in results if not r["passed"]]
        manifest["error"] = {"type": "assertion_failure", "failed": failed}
    write_manifest(outdir, manifest)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}: {r['stat']} = {r['value']}")
    print(f"manifest: {outdir / 'manifest.json'}")
    return EXIT_OK if ok else EXIT_ASSERT


REPORT_COLUMNS = ["experiment", "seed", "n_seeds", "key_params", "headline_stat",
                  "headline_value", "status", "passed"]


def build_report(dirs) -> str:
    rows = []
    for d in dirs:
        m = json.loads((Path(d) / "manifest.json").read_text())
        results = m.get("assertions") or []
        head = m.get("headline") or {}
        rows.append({
            "experiment": m.get("experiment", ""),
            "seed": m.get("seed", ""),
            "n_seeds": m.get("n_seeds", ""),
            "key_params": json.dumps(m.get("key_params", {}), sort_keys=True),
            "headline_stat": head.get("stat", ""),
            "headline_value": head.get("value", ""),
            "status": m.get("status", ""),
            "passed": m.get("status") == "ok" and all(r.get("passed") for r in results),
        })
    rows.sort(key=lambda r: (str(r["experiment"]), r["seed"] if isinstance(r["seed"], int) else -1))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    text = build_report(args.dirs)
    if args.out:
        write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="follmer-kit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    run.add_argument("--threads", type=int, default=None,
                     help=f"worker threads for seed fan-out (default ${THREADS_ENV} or 1)")
    run.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")
    run.set_defaults(func=cmd_run)
    rep = sub.add_parser("report", help="merge manifests into a CSV table")
    rep.add_argument("dirs", nargs="*")
    rep.add_argument("--out", default=None, help="write the table here instead of stdout")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
