"""Reference values computed by routes independent of the main algorithms."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np


def random_sign_series_moment(hurst: float, p: int, draws: int = 10**6, seed: int = 0,
                              start: int = 0, chunk: int = 200_000) -> float:
    """Monte Carlo estimate of ``E|sum_{n >= start} 2^{-n(1-H)} Y_n|^p`` for fair signs ``Y_n``.

    The series is truncated once the weights drop below double precision.
    """
    if not 0.0 < hurst < 1.0:
        raise ValueError("hurst must lie in (0, 1)")
    n_terms = int(math.ceil(60.0 / (1.0 - hurst)))
    weights = 2.0 ** (-(1.0 - hurst) * np.arange(start, start + n_terms))
    rng = np.random.default_rng(seed)
    total, done = 0.0, 0
    while done < draws:
        m = min(chunk, draws - done)
        signs = rng.integers(0, 2, size=(m, n_terms), dtype=np.int8) * 2 - 1
        z = signs @ weights
        total += float(np.sum(np.abs(z) ** p))
        done += m
    return total / draws


def gaussian_moment_mc(p: int, draws: int = 10**7, seed: int = 0, chunk: int = 10**6) -> float:
    """Monte Carlo ``E|Z|^p`` for a standard normal ``Z``."""
    rng = np.random.default_rng(seed)
    total, done = 0.0, 0
    while done < draws:
        m = min(chunk, draws - done)
        total += float(np.sum(np.abs(rng.standard_normal(m)) ** p))
        done += m
    return total / draws


def heat_kernel_transport(x0: Callable[[np.ndarray], np.ndarray], x: np.ndarray, t: float,
                          c: float, shift: float, half_width: float = 12.0,
                          spacing: float = 2e-3) -> np.ndarray:
    """``(4 pi c t)^{-1/2} int exp(-(x - y)^2 / (4 c t)) x0(y + shift) dy`` by the trapezoid rule.

    The integration window is ``x +- half_width * sqrt(2 c t)``.
    """
    x = np.asarray(x, dtype=np.float64)
    s = math.sqrt(2.0 * c * t)
    u = np.arange(-half_width * s, half_width * s + spacing / 2, spacing)
    kern = np.exp(-(u**2) / (4.0 * c * t)) / math.sqrt(4.0 * math.pi * c * t)
    out = np.empty_like(x)
    for i, xi in enumerate(x):
        out[i] = np.trapezoid(kern * x0(xi - u + shift), dx=spacing)
    return out
