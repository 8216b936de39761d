"""p-th variation of a path along a partition sequence.

The level-n measure puts mass ``|w(t_{j+1}) - w(t_j)|**p`` on each interval;
its cumulative function is recorded at partition points, counting an
interval once its right endpoint has been reached (so every cumulative
function starts at 0).  Convergence of the measures is monitored as uniform
convergence of the cumulative functions on the finest grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .pathgen import Partition, PartitionKind, PartitionSequence, SamplePath, make_partition

DEFAULT_WINDOW = 32


def check_even_p(p) -> int:
    if isinstance(p, bool) or not isinstance(p, (int, np.integer)):
        raise ValueError(f"p must be an even integer >= 2, got {p!r}")
    if p < 2 or p % 2:
        raise ValueError(f"p must be an even integer >= 2, got {p}")
    return int(p)


def gaussian_abs_moment(p: int) -> float:
    """E|Z|**p for standard normal Z and even p: c_2 = 1, c_p = (p-1) c_{p-2}."""
    p = check_even_p(p)
    c = 1.0
    for q in range(4, p + 1, 2):
        c *= q - 1
    return c


@dataclass(frozen=True)
class GaussianMomentTable:
    entries: dict[int, float]

    @classmethod
    def up_to(cls, p_max: int) -> GaussianMomentTable:
        return cls({p: gaussian_abs_moment(p) for p in range(2, p_max + 1, 2)})

    def __getitem__(self, p: int) -> float:
        return self.entries[p]


@dataclass(frozen=True, eq=False)
class CumulativeVariation:
    """Right-continuous step function t_j -> mu_n([0, t_j])."""

    points: np.ndarray
    values: np.ndarray
    p: int
    level: int

    @property
    def total(self) -> float:
        return float(self.values[-1])

    @property
    def masses(self) -> np.ndarray:
        return np.diff(self.values)

    def __call__(self, t):
        idx = np.searchsorted(self.points, np.asarray(t, dtype=np.float64), side="right") - 1
        out = self.values[np.clip(idx, 0, self.points.size - 1)]
        return float(out) if np.ndim(out) == 0 else out

    def to_csv(self, file) -> None:
        np.savetxt(file, np.column_stack([self.points, self.values]), delimiter=",",
                   header="t,cumulative", comments="", fmt="%.17g")


def interval_masses(path: SamplePath, partition: Partition, p: int) -> np.ndarray:
    """|increment|**p for every interval of the partition."""
    s = partition.stride_on(path)
    if s is not None:
        return kernels.pvar_terms(path.values, s, p)
    return np.abs(np.diff(partition.values_on(path))) ** p


def empirical_pth_variation(path: SamplePath, partition: Partition, p: int) -> CumulativeVariation:
    p = check_even_p(p)
    masses = interval_masses(path, partition, p)
    values = np.concatenate([[0.0], np.cumsum(masses)])
    return CumulativeVariation(partition.points, values, p, partition.level)


@dataclass(frozen=True, eq=False)
class VariationEstimate:
    """Per-level cumulative functions and the finest level taken as the limit.

    ``diagnostics[i]`` is the sup distance of level ``levels[i]`` to the finest
    level on the common grid; ``consecutive_gaps[i]`` compares levels i and i+1.
    """

    p: int
    levels: tuple[int, ...]
    cumulative: tuple[CumulativeVariation, ...]
    limit_grid: np.ndarray
    limit_values: np.ndarray
    diagnostics: np.ndarray
    consecutive_gaps: np.ndarray
    kind: PartitionKind = PartitionKind.DYADIC

    def __call__(self, t):
        out = np.interp(np.asarray(t, dtype=np.float64), self.limit_grid, self.limit_values)
        return float(out) if np.ndim(out) == 0 else out

    def at_level(self, n: int) -> CumulativeVariation:
        return self.cumulative[self.levels.index(n)]

    def write_csv(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for cum in self.cumulative:
            cum.to_csv(d / f"variation_level_{cum.level:02d}.csv")
        np.savetxt(d / "diagnostics.csv", np.column_stack([self.levels, self.diagnostics]),
                   delimiter=",", header="level,sup_gap", comments="", fmt=["%d", "%.17g"])

    @classmethod
    def from_values(cls, p: int, grid, values) -> VariationEstimate:
        """Wrap a prescribed variation function (e.g. ``c_p * t``) as an estimate."""
        grid = np.asarray(grid, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        cum = CumulativeVariation(grid, values, check_even_p(p), -1)
        return cls(p, (-1,), (cum,), grid, values, np.zeros(1), np.zeros(0))


def variation_limit(path: SamplePath, seq: PartitionSequence, p: int,
                    levels=None) -> VariationEstimate:
    p = check_even_p(p)
    levels = tuple(seq.levels if levels is None else (int(n) for n in levels))
    if not levels:
        raise ValueError("at least one level is required")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"levels must be strictly increasing, got {levels}")
    if seq.kind is PartitionKind.DYADIC and levels[-1] > path.level:
        raise ValueError(f"finest level {levels[-1]} exceeds the path grid level {path.level}")

    cumulative = tuple(empirical_pth_variation(path, make_partition(seq, n), p) for n in levels)
    finest = cumulative[-1]
    grid = finest.points
    on_grid = np.array([c(grid) for c in cumulative])
    diagnostics = np.abs(on_grid - finest.values).max(axis=1)
    gaps = np.abs(np.diff(on_grid, axis=0)).max(axis=1) if len(levels) > 1 else np.zeros(0)
    return VariationEstimate(p, levels, cumulative, grid, finest.values.copy(), diagnostics,
                             gaps, seq.kind)


@dataclass(frozen=True, eq=False)
class VariationDerivative:
    """Piecewise-linear estimate of the derivative of the variation."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        out = np.interp(np.asarray(t, dtype=np.float64), self.times, self.values)
        return float(out) if np.ndim(out) == 0 else out

    def median(self) -> float:
        return float(np.median(self.values))

    def integral(self, t):
        """Exact integral over [0, t] of the piecewise-linear interpolant."""
        cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(self.times)
                                               * (self.values[1:] + self.values[:-1]))])
        t = np.asarray(t, dtype=np.float64)
        j = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        dt = t - self.times[j]
        slope = (self.values[j + 1] - self.values[j]) / (self.times[j + 1] - self.times[j])
        out = cum[j] + dt * (self.values[j] + 0.5 * slope * dt)
        return float(out) if out.ndim == 0 else out


def variation_derivative(est: VariationEstimate, window: int = DEFAULT_WINDOW) -> VariationDerivative:
    """Centered difference quotient over ``window`` grid cells, clamped at 0.

    The stencil shrinks to one side near the ends of [0, 1].
    """
    if window < 1:
        raise ValueError("window must be a positive number of grid cells")
    t, F = est.limit_grid, est.limit_values
    n = t.size - 1
    half = max(1, min(window, n) // 2)
    i = np.arange(n + 1)
    lo = np.clip(i - half, 0, n)
    hi = np.clip(i + half, 0, n)
    # keep the stencil width when clipped at an end
    lo = np.where(hi == n, np.maximum(n - 2 * half, 0), lo)
    hi = np.where(lo == 0, np.minimum(2 * half, n), hi)
    d = (F[hi] - F[lo]) / (t[hi] - t[lo])
    return VariationDerivative(t.copy(), np.maximum(d, 0.0))


def theoretical_fbm_variation(p: int, grid) -> VariationEstimate:
    """[W^{1/p}]_p(t) = c_p t on ``grid``."""
    grid = np.asarray(grid, dtype=np.float64)
    return VariationEstimate.from_values(p, grid, gaussian_abs_moment(p) * grid)

