# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the empirical Bellman losses.

Every reduction uses Neumaier's compensated summation so that means over
millions of tuples stay within a few ulps of the exactly rounded result.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline void _acc(double x, double* s, double* comp) noexcept nogil:
    cdef double t = s[0] + x
    if fabs(s[0]) >= fabs(x):
        comp[0] += (s[0] - t) + x
    else:
        comp[0] += (x - t) + s[0]
    s[0] = t


def neumaier_sum(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double s = 0.0, comp = 0.0
    with nogil:
        for i in range(n):
            _acc(x[i], &s, &comp)
    return s + comp


def mean_sq_residual(const double[::1] pred, const double[::1] r, const double[::1] boot):
    cdef Py_ssize_t i, n = pred.shape[0]
    cdef double s = 0.0, comp = 0.0, d
    if n == 0:
        return 0.0
    with nogil:
        for i in range(n):
            d = pred[i] - r[i] - boot[i]
            _acc(d * d, &s, &comp)
    return (s + comp) / n


def pairwise_mean_sq_residual(const double[:, ::1] pred, const double[::1] r,
                              const double[:, ::1] boot):
    cdef Py_ssize_t k, j, i
    cdef Py_ssize_t K = pred.shape[0], J = boot.shape[0], n = pred.shape[1]
    out_arr = np.zeros((K, J), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double s, comp, d
    if n == 0:
        return out_arr
    with nogil:
        for k in range(K):
            for j in range(J):
                s = 0.0
                comp = 0.0
                for i in range(n):
                    d = pred[k, i] - r[i] - boot[j, i]
                    _acc(d * d, &s, &comp)
                out[k, j] = (s + comp) / n
    return out_arr


def half_sq_diff_mean(const double[:, ::1] boot1, const double[:, ::1] boot2):
    cdef Py_ssize_t j, i
    cdef Py_ssize_t J = boot1.shape[0], n = boot1.shape[1]
    out_arr = np.zeros(J, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double s, comp, d
    if n == 0:
        return out_arr
    with nogil:
        for j in range(J):
            s = 0.0
            comp = 0.0
            for i in range(n):
                d = boot1[j, i] - boot2[j, i]
                _acc(0.5 * d * d, &s, &comp)
            out[j] = (s + comp) / n
    return out_arr
