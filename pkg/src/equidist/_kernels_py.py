"""Pure-Python kernels, the fallback for ``_kernels``.

Arithmetic mirrors the Cython source operation by operation.
"""
import math

import numpy as np

EARTH_RADIUS_M = 6371008.8
DEG = 0.017453292519943295

_sin = math.sin
_cos = math.cos
_asin = math.asin
_sqrt = math.sqrt


def haversine_scalar(lat1, lon1, lat2, lon2):
    p1 = lat1 * DEG
    p2 = lat2 * DEG
    s1 = _sin((p2 - p1) * 0.5)
    s2 = _sin(((lon2 - lon1) * DEG) * 0.5)
    a = s1 * s1 + _cos(p1) * _cos(p2) * s2 * s2
    if a > 1.0:
        a = 1.0
    return 2.0 * EARTH_RADIUS_M * _asin(_sqrt(a))


def haversine_arrays(lat1, lon1, lat2, lon2):
    hav = haversine_scalar
    out = [hav(a, b, c, d) for a, b, c, d in zip(lat1.tolist(), lon1.tolist(),
                                                  lat2.tolist(), lon2.tolist())]
    return np.array(out, dtype=np.float64)


def haversine_one_to_many(lat, lon, lats, lons):
    hav = haversine_scalar
    lat = float(lat)
    lon = float(lon)
    out = [hav(lat, lon, a, b) for a, b in zip(lats.tolist(), lons.tolist())]
    return np.array(out, dtype=np.float64)


def weighted_cross_sum(indptr, indices, weights, z):
    ptr = indptr.tolist()
    idx = indices.tolist()
    w = weights.tolist()
    zz = z.tolist()
    s0 = 0.0
    num = 0.0
    for i in range(len(ptr) - 1):
        zi = zz[i]
        for k in range(ptr[i], ptr[i + 1]):
            s0 = s0 + w[k]
            num = num + w[k] * zi * zz[idx[k]]
    return s0, num


def icar_sweep(v, indptr, indices, weights, target, tau_v, tau_lik, normals):
    ptr = indptr.tolist()
    idx = indices.tolist()
    w = weights.tolist()
    t = target.tolist()
    eps = normals.tolist()
    vv = v.tolist()
    for i in range(len(vv)):
        wsum = 0.0
        wv = 0.0
        for k in range(ptr[i], ptr[i + 1]):
            wsum = wsum + w[k]
            wv = wv + w[k] * vv[idx[k]]
        prec = tau_v * wsum + tau_lik
        mean = (tau_v * wv + tau_lik * t[i]) / prec
        vv[i] = mean + eps[i] / _sqrt(prec)
    v[:] = vv
