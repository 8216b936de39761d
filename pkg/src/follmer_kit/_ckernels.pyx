# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the loops in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow

cnp.import_array()


cdef inline double _ipow(double x, int p) nogil:
    cdef double r = 1.0
    while p > 0:
        if p & 1:
            r *= x
        x *= x
        p >>= 1
    return r


def pvar_terms(values, Py_ssize_t stride, int p):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t m = (v.shape[0] - 1) // stride
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t j
    with nogil:
        for j in range(m):
            o[j] = _ipow(fabs(v[(j + 1) * stride] - v[j * stride]), p)
    return out


def compensated_sum(derivs, increments):
    cdef const double[:, ::1] d = np.ascontiguousarray(derivs, dtype=np.float64)
    cdef const double[::1] dx = np.ascontiguousarray(increments, dtype=np.float64)
    cdef Py_ssize_t K = d.shape[0], m = dx.shape[0]
    cdef Py_ssize_t j, k
    cdef double acc, total = 0.0
    cdef double[::1] inv_fact = np.empty(K + 1, dtype=np.float64)
    inv_fact[0] = 1.0
    for k in range(1, K + 1):
        inv_fact[k] = inv_fact[k - 1] / k
    with nogil:
        for j in range(m):
            acc = 0.0
            for k in range(K, 0, -1):
                acc = (acc + d[k - 1, j] * inv_fact[k]) * dx[j]
            total += acc
    return total


def block_oscillation(values, Py_ssize_t stride):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = (v.shape[0] - 1) // stride
    cdef Py_ssize_t j, i
    cdef double hi, lo, x, best = 0.0
    with nogil:
        for j in range(n):
            hi = v[j * stride]
            lo = hi
            for i in range(j * stride + 1, (j + 1) * stride + 1):
                x = v[i]
                if x > hi:
                    hi = x
                elif x < lo:
                    lo = x
            if hi - lo > best:
                best = hi - lo
    return best


def takagi(int level, int depth, double hurst):
    cdef Py_ssize_t size = (<Py_ssize_t>1) << level
    cdef Py_ssize_t mask = size - 1
    out = np.zeros(size + 1, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef int n
    cdef double w, frac, inv = 1.0 / size
    for n in range(depth + 1):
        w = pow(2.0, -n * hurst)
        with nogil:
            for i in range(size + 1):
                frac = ((i << n) & mask) * inv
                o[i] += w * (frac if frac < 1.0 - frac else 1.0 - frac)
    return out
