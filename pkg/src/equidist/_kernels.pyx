# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a line-for-line twin in ``_kernels_py``; both perform
the same floating-point operations in the same order so results agree bit for
bit (no fast-math, scalar libm calls).
"""
import numpy as np

from libc.math cimport asin, cos, sin, sqrt
from libc.stdint cimport int64_t

cdef double EARTH_RADIUS_M = 6371008.8
cdef double DEG = 0.017453292519943295


cdef inline double _hav(double lat1, double lon1, double lat2, double lon2) noexcept nogil:
    cdef double p1 = lat1 * DEG
    cdef double p2 = lat2 * DEG
    cdef double s1 = sin((p2 - p1) * 0.5)
    cdef double s2 = sin(((lon2 - lon1) * DEG) * 0.5)
    cdef double a = s1 * s1 + cos(p1) * cos(p2) * s2 * s2
    if a > 1.0:
        a = 1.0
    return 2.0 * EARTH_RADIUS_M * asin(sqrt(a))


def haversine_scalar(double lat1, double lon1, double lat2, double lon2):
    return _hav(lat1, lon1, lat2, lon2)


def haversine_arrays(const double[::1] lat1, const double[::1] lon1,
                     const double[::1] lat2, const double[::1] lon2):
    cdef Py_ssize_t n = lat1.shape[0]
    cdef Py_ssize_t i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _hav(lat1[i], lon1[i], lat2[i], lon2[i])
    return out


def haversine_one_to_many(double lat, double lon,
                          const double[::1] lats, const double[::1] lons):
    cdef Py_ssize_t n = lats.shape[0]
    cdef Py_ssize_t i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _hav(lat, lon, lats[i], lons[i])
    return out


def weighted_cross_sum(const int64_t[::1] indptr, const int64_t[::1] indices,
                       const double[::1] weights, const double[::1] z):
    """Return (sum w_ij, sum w_ij z_i z_j) accumulated row by row."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, k
    cdef double s0 = 0.0
    cdef double num = 0.0
    with nogil:
        for i in range(n):
            for k in range(indptr[i], indptr[i + 1]):
                s0 = s0 + weights[k]
                num = num + weights[k] * z[i] * z[indices[k]]
    return s0, num


def icar_sweep(double[::1] v, const int64_t[::1] indptr, const int64_t[::1] indices,
               const double[::1] weights, const double[::1] target,
               double tau_v, double tau_lik, const double[::1] normals):
    """One in-place single-site Gibbs sweep over an ICAR field.

    Site i combines its neighbour-mean prior N(m_i, 1/(tau_v w_i+)) with a
    Gaussian pseudo-observation ``target[i]`` of precision ``tau_lik``.
    """
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t i, k
    cdef double wsum, wv, prec, mean
    with nogil:
        for i in range(n):
            wsum = 0.0
            wv = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                wsum = wsum + weights[k]
                wv = wv + weights[k] * v[indices[k]]
            prec = tau_v * wsum + tau_lik
            mean = (tau_v * wv + tau_lik * target[i]) / prec
            v[i] = mean + normals[i] / sqrt(prec)
