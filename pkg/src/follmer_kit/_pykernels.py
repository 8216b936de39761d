"""Pure numpy implementations of the hot loops.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
The two are checked against each other in ``tests/test_kernels.py``.
"""
import math

import numpy as np


def pvar_terms(values, stride, p):
    """|v[(j+1)s] - v[js]|**p for every block j of a strided sub-grid."""
    v = np.asarray(values, dtype=np.float64)[::stride]
    return np.abs(np.diff(v)) ** p


def compensated_sum(derivs, increments):
    """Sum over j and k = 1..K of derivs[k-1, j] * increments[j]**k / k!.

    ``derivs`` has shape (K, m); the inner sum is evaluated by Horner's rule
    so no power table is materialised.
    """
    d = np.asarray(derivs, dtype=np.float64)
    dx = np.asarray(increments, dtype=np.float64)
    K = d.shape[0]
    acc = np.zeros_like(dx)
    for k in range(K, 0, -1):
        acc = (acc + d[k - 1] / math.factorial(k)) * dx
    return float(acc.sum())


def block_oscillation(values, stride):
    """max over blocks [js, (j+1)s] of (max - min), right endpoint included."""
    v = np.asarray(values, dtype=np.float64)
    n = (v.size - 1) // stride
    body = v[: n * stride].reshape(n, stride)
    right = v[stride::stride][:n]
    hi = np.maximum(body.max(axis=1), right)
    lo = np.minimum(body.min(axis=1), right)
    return float((hi - lo).max())


def takagi(level, depth, hurst):
    """Truncated Takagi-Landsberg series on the grid k / 2**level."""
    size = 1 << level
    i = np.arange(size + 1, dtype=np.int64)
    out = np.zeros(size + 1)
    for n in range(depth + 1):
        # 2**n * t mod 1, computed exactly in integers
        frac = ((i << n) & (size - 1)) / size
        out += 2.0 ** (-n * hurst) * np.minimum(frac, 1.0 - frac)
    return out
