# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled upper hull (monotone chain, collinear points kept)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def upper_hull(const double[:] x, const double[:] y):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.intp_t, ndim=1] hull = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t m = 0, k, i, j
    cdef double cross
    for k in range(n):
        while m >= 2:
            i = hull[m - 2]
            j = hull[m - 1]
            cross = (x[j] - x[i]) * (y[k] - y[i]) - (y[j] - y[i]) * (x[k] - x[i])
            if cross > 0:
                m -= 1
            else:
                break
        hull[m] = k
        m += 1
    return hull[:m].copy()


def upper_hulls(const double[:] x, const double[:, :] Y):
    cdef Py_ssize_t r
    return [upper_hull(x, Y[r]) for r in range(Y.shape[0])]
