# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Every reduction accumulates in ascending index order (strict left-to-right),
which pins the floating-point result bit-for-bit across runs and batch sizes.
"""

import numpy as np

from libc.math cimport exp

NAME = "cy"


def matmul(double[:, ::1] a, double[:, ::1] b):
    """a (n,k) @ b (k,m) -> (n,m)."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, l, j
    cdef double ail
    with nogil:
        for i in range(n):
            for l in range(k):
                ail = a[i, l]
                for j in range(m):
                    c[i, j] += ail * b[l, j]
    return out


def matmul_t1(double[:, ::1] a, double[:, ::1] b):
    """a.T @ b for a (n,k), b (n,m) -> (k,m)."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    out = np.zeros((k, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t r, i, j
    cdef double ari
    with nogil:
        for r in range(n):
            for i in range(k):
                ari = a[r, i]
                for j in range(m):
                    c[i, j] += ari * b[r, j]
    return out


def matmul_t2(double[:, ::1] a, double[:, ::1] b):
    """a @ b.T for a (n,m), b (k,m) -> (n,k)."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], k = b.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, j, l
    cdef double s
    with nogil:
        for i in range(n):
            for j in range(k):
                s = 0.0
                for l in range(m):
                    s += a[i, l] * b[j, l]
                c[i, j] = s
    return out


def colsum(double[:, ::1] a):
    """Column sums of a (n,m) -> (m,)."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] c = out
    cdef Py_ssize_t r, j
    with nogil:
        for r in range(n):
            for j in range(m):
                c[j] += a[r, j]
    return out


def softmax_rows(double[:, ::1] z, double tau):
    """Row-wise softmax(z / tau) with max subtraction."""
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] p = out
    cdef Py_ssize_t i, j
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = z[i, 0]
            for j in range(1, m):
                if z[i, j] > mx:
                    mx = z[i, j]
            s = 0.0
            for j in range(m):
                e = exp((z[i, j] - mx) / tau)
                p[i, j] = e
                s += e
            for j in range(m):
                p[i, j] /= s
    return out
