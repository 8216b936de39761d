"""Driving paths on dyadic grids and the partition sequences they are sampled along.

Every path lives on the uniform grid ``k / 2**L`` of ``[0, 1]``, so dyadic
partitions of level ``n <= L`` are exact sub-grids and variation sums along
them involve no interpolation.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import kernels

MIN_LEVEL, MAX_LEVEL = 2, 24


class PartitionKind(str, enum.Enum):
    DYADIC = "dyadic"
    EQUIDISTANT = "equidistant"


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SamplePath:
    """A continuous path sampled on ``2**level + 1`` uniform points of [0, 1].

    Off-grid evaluation is linear interpolation; evaluation at grid points
    returns the stored values bit-for-bit.
    """

    times: np.ndarray
    values: np.ndarray
    label: str = ""
    seed: int | None = None
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        t = _frozen(self.times)
        v = _frozen(self.values)
        if t.ndim != 1 or t.shape != v.shape:
            raise ValueError("times and values must be 1-d arrays of equal length")
        n = t.size - 1
        if n < 1 or n & (n - 1):
            raise ValueError(f"grid must have 2**L + 1 points, got {t.size}")
        if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must increase strictly from 0 to 1")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def level(self) -> int:
        return (self.times.size - 1).bit_length() - 1

    def __len__(self):
        return self.times.size

    def __call__(self, t):
        """Evaluate at arbitrary ``t`` in [0, 1]."""
        t_arr = np.asarray(t, dtype=np.float64)
        size = self.times.size - 1
        k = np.rint(t_arr * size)
        on_grid = (k / size == t_arr) & (k >= 0) & (k <= size)
        idx = np.clip(k, 0, size).astype(np.int64)
        out = np.where(on_grid, self.values[idx], np.interp(t_arr, self.times, self.values))
        return float(out) if out.ndim == 0 else out

    def scaled(self, factor: float) -> SamplePath:
        return SamplePath(self.times, factor * self.values, f"{factor}*{self.label}", self.seed,
                          dict(self.params))

    def manifest(self) -> dict[str, Any]:
        return {
            "generator": self.params.get("generator", "custom"),
            "params": {k: v for k, v in self.params.items() if k != "generator"},
            "seed": self.seed,
            "level": self.level,
            "label": self.label,
        }

    def to_csv(self, file) -> None:
        np.savetxt(file, np.column_stack([self.times, self.values]), delimiter=",",
                   header="t,value", comments="", fmt="%.17g")

    def write(self, directory, stem: str = "path") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.to_csv(d / f"{stem}.csv")
        (d / f"{stem}.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))

    @classmethod
    def read(cls, directory, stem: str = "path") -> SamplePath:
        d = Path(directory)
        data = np.loadtxt(d / f"{stem}.csv", delimiter=",", skiprows=1)
        meta = json.loads((d / f"{stem}.json").read_text())
        params = dict(meta.get("params", {}), generator=meta.get("generator", "custom"))
        return cls(data[:, 0], data[:, 1], meta.get("label", ""), meta.get("seed"), params)


def uniform_times(level: int) -> np.ndarray:
    return np.arange((1 << level) + 1, dtype=np.float64) / (1 << level)


def _check_level(level: int) -> None:
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise ValueError(f"level must lie in [{MIN_LEVEL}, {MAX_LEVEL}], got {level}")


def _rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.default_rng(seed)


def fgn_circulant_eigenvalues(hurst: float, n: int) -> np.ndarray:
    """Eigenvalues of the 2n circulant embedding of unit-step fGn autocovariance."""
    k = np.arange(n + 1, dtype=np.float64)
    two_h = 2.0 * hurst
    rho = 0.5 * (np.abs(k + 1) ** two_h + np.abs(k - 1) ** two_h - 2.0 * k**two_h)
    row = np.concatenate([rho, rho[-2:0:-1]])
    return np.fft.fft(row).real


def gen_fbm(hurst: float, level: int, seed: int) -> SamplePath:
    """Fractional Brownian motion by Davies-Harte circulant embedding.

    Increments over the grid form stationary fractional Gaussian noise with
    variance ``2**(-2 H level)``; ``W_0 = 0``.  Negative circulant eigenvalues
    (rounding only) are clipped to zero and the clip count is written into
    the label.
    """
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {hurst}")
    _check_level(level)
    n = 1 << level
    lam = fgn_circulant_eigenvalues(hurst, n)
    clipped = int(np.count_nonzero(lam < 0))
    lam = np.clip(lam, 0.0, None)

    rng = _rng(seed)
    m = 2 * n
    xi = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    fgn = np.fft.fft(np.sqrt(lam / m) * xi).real[:n] * n ** (-hurst)
    values = np.concatenate([[0.0], np.cumsum(fgn)])

    label = f"fbm(H={hurst:g},L={level},seed={seed})"
    if clipped:
        label += f" [clipped {clipped} negative eigenvalues]"
    params = {"generator": "fbm", "H": hurst, "level": level, "clipped_eigenvalues": clipped}
    return SamplePath(uniform_times(level), values, label, seed, params)


def gen_wiener(level: int, seed: int) -> SamplePath:
    """Wiener path from independent Gaussian increments."""
    _check_level(level)
    n = 1 << level
    dw = _rng(seed).standard_normal(n) * math.sqrt(1.0 / n)
    values = np.concatenate([[0.0], np.cumsum(dw)])
    params = {"generator": "wiener", "level": level}
    return SamplePath(uniform_times(level), values, f"wiener(L={level},seed={seed})", seed, params)


def gen_takagi_landsberg(hurst: float, depth: int | None = None, level: int = 14) -> SamplePath:
    """Takagi-Landsberg function truncated after ``depth`` Faber-Schauder levels.

    Defaults to ``depth = level - 2``.
    """
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {hurst}")
    _check_level(level)
    if depth is None:
        depth = level - 2
    if not 0 <= depth <= level:
        raise ValueError(f"depth must lie in [0, level={level}], got {depth}")
    values = kernels.takagi(level, depth, float(hurst))
    params = {"generator": "takagi", "H": hurst, "depth": depth, "level": level}
    return SamplePath(uniform_times(level), values, f"takagi(H={hurst:g},depth={depth})", None,
                      params)


def gen_deterministic(kind: str, level: int, param: float = 1.0) -> SamplePath:
    """Exact samples of ``slope * t`` (linear), ``c`` (constant) or ``t**q`` (monomial)."""
    _check_level(level)
    t = uniform_times(level)
    if kind == "linear":
        values = param * t
    elif kind == "constant":
        values = np.full_like(t, param)
    elif kind == "monomial":
        values = t**param
    else:
        raise ValueError(f"unknown deterministic path kind {kind!r}")
    params = {"generator": kind, "param": param, "level": level}
    return SamplePath(t, values, f"{kind}({param:g})", None, params)


@dataclass(frozen=True, eq=False)
class Partition:
    points: np.ndarray
    level: int
    kind: PartitionKind = PartitionKind.DYADIC

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.size < 2 or pts[0] != 0.0 or pts[-1] != 1.0 or np.any(np.diff(pts) <= 0):
            raise ValueError("partition points must increase strictly from 0 to 1")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.size

    @property
    def mesh(self) -> float:
        return float(np.diff(self.points).max())

    def stride_on(self, path: SamplePath) -> int | None:
        """Grid stride if this is a dyadic sub-grid of ``path``, else None."""
        if self.kind is PartitionKind.DYADIC and self.level <= path.level:
            return 1 << (path.level - self.level)
        return None

    def values_on(self, path: SamplePath) -> np.ndarray:
        s = self.stride_on(path)
        if s is not None:
            return path.values[::s]
        return np.asarray(path(self.points))


@dataclass(frozen=True)
class PartitionSequence:
    kind: PartitionKind
    levels: tuple[int, ...]

    def __init__(self, kind, levels):
        object.__setattr__(self, "kind", PartitionKind(kind))
        object.__setattr__(self, "levels", tuple(int(n) for n in levels))

    def __iter__(self):
        return (make_partition(self, n) for n in self.levels)

    def __getitem__(self, i):
        return make_partition(self, self.levels[i])

    @property
    def finest(self) -> int:
        return self.levels[-1]


def make_partition(seq: PartitionSequence | PartitionKind | str, n: int) -> Partition:
    kind = seq.kind if isinstance(seq, PartitionSequence) else PartitionKind(seq)
    if kind is PartitionKind.DYADIC:
        if n < 0:
            raise ValueError("dyadic level must be non-negative")
        pts = np.arange((1 << n) + 1, dtype=np.float64) / (1 << n)
    else:
        if n < 1:
            raise ValueError("equidistant partitions need n >= 1 intervals")
        pts = np.arange(n + 1, dtype=np.float64) / n
    return Partition(pts, n, kind)


def oscillation(path: SamplePath, partition: Partition) -> float:
    """Largest range of the path over a single partition interval."""
    s = partition.stride_on(path)
    if s is not None:
        return kernels.block_oscillation(path.values, s)

    # merge partition points (interpolated) with interior grid points
    pts = partition.points
    inner = (path.times > pts[0]) & (path.times < pts[-1])
    t_all = np.concatenate([pts, path.times[inner]])
    v_all = np.concatenate([np.asarray(path(pts)), path.values[inner]])
    order = np.argsort(t_all, kind="stable")
    v_all = v_all[order]
    pos = np.searchsorted(t_all[order], pts, side="left")
    hi = np.maximum(np.maximum.reduceat(v_all, pos[:-1]), v_all[pos[1:]])
    lo = np.minimum(np.minimum.reduceat(v_all, pos[:-1]), v_all[pos[1:]])
    return float((hi - lo).max())
