"""Time the compiled kernels against the numpy fallback.

Usage: ``python benchmarks/bench_kernels.py [--repeat R] [--level L]``
"""
import argparse
import timeit

import numpy as np

from follmer_kit import _pykernels

try:
    from follmer_kit import _ckernels
except ImportError:
    _ckernels = None


def cases(level):
    rng = np.random.default_rng(0)
    n = 2**level
    values = np.concatenate([[0.0], np.cumsum(rng.standard_normal(n))]) * n**-0.5
    derivs = np.ascontiguousarray(rng.standard_normal((4, n)))
    incs = np.diff(values)
    return {
        "pvar_terms": lambda k: k.pvar_terms(values, 4, 4),
        "compensated_sum": lambda k: k.compensated_sum(derivs, incs),
        "block_oscillation": lambda k: k.block_oscillation(values, 16),
        "takagi": lambda k: k.takagi(level, level - 2, 0.25),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--level", type=int, default=16)
    args = ap.parse_args()
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"level={args.level} repeat={args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.level).items():
        best = [min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for _, k in backends]
        speed = f"{best[0] / best[1]:>9.1f}x" if len(best) == 2 else ""
        print(f"{name:<20}" + "".join(f"{b * 1e3:>10.3f}ms" for b in best) + speed)


if __name__ == "__main__":
    main()
