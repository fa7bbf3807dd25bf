# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-iteration kernels in ``_kernels_py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()


def scatter_add(const cnp.int64_t[::1] slot, const double[::1] values, Py_ssize_t nnz):
    out = np.zeros(nnz)
    cdef double[::1] o = out
    cdef Py_ssize_t k, n = slot.shape[0]
    for k in range(n):
        o[slot[k]] += values[k]
    return out


def bus_injection(const double[::1] vr, const double[::1] vi, const double[::1] p,
                  const double[::1] q, const double[::1] lam_r, const double[::1] lam_i):
    cdef Py_ssize_t k, n = vr.shape[0]
    outs = [np.empty(n) for _ in range(9)]
    cdef double[::1] hr = outs[0], hi = outs[1], drr = outs[2], dri = outs[3]
    cdef double[::1] h_rr = outs[4], h_ri = outs[5], h_ii = outs[6], cp = outs[7], dp = outs[8]
    cdef double a, b, s, s2, s3, u, w, ua, ub, haa, hab, pk, qk
    for k in range(n):
        a = vr[k]
        b = vi[k]
        pk = p[k]
        qk = q[k]
        s = a * a + b * b
        s2 = s * s
        s3 = s2 * s
        hr[k] = (pk * a + qk * b) / s
        hi[k] = (pk * b - qk * a) / s
        u = pk * (b * b - a * a) - 2.0 * qk * a * b
        w = qk * (a * a - b * b) - 2.0 * pk * a * b
        drr[k] = u / s2
        dri[k] = w / s2
        ua = -2.0 * pk * a - 2.0 * qk * b
        ub = 2.0 * pk * b - 2.0 * qk * a
        haa = (ua * s - 4.0 * a * u) / s3
        hab = (ub * s - 4.0 * b * u) / s3
        h_rr[k] = lam_r[k] * haa + lam_i[k] * hab
        h_ri[k] = lam_r[k] * hab - lam_i[k] * haa
        h_ii[k] = -lam_r[k] * haa - lam_i[k] * hab
        cp[k] = (a * a - b * b) / s2
        dp[k] = 2.0 * a * b / s2
    return tuple(outs)


def primal_damping(const double[::1] x, const double[::1] dx, const double[::1] lower,
                   const double[::1] upper, double alpha):
    cdef Py_ssize_t k, n = x.shape[0]
    out = np.ones(n)
    cdef double[::1] tau = out
    cdef double t
    for k in range(n):
        if dx[k] > 0 and isfinite(upper[k]):
            t = alpha * (upper[k] - x[k]) / dx[k]
        elif dx[k] < 0 and isfinite(lower[k]):
            t = alpha * (lower[k] - x[k]) / dx[k]
        else:
            continue
        if t < 1.0:
            tau[k] = t
    return out


def dual_damping(const double[::1] mu, const double[::1] dmu, double alpha):
    cdef Py_ssize_t k, n = mu.shape[0]
    out = np.ones(n)
    cdef double[::1] tau = out
    cdef double t
    for k in range(n):
        if dmu[k] < 0:
            t = -alpha * mu[k] / dmu[k]
            if t < 1.0:
                tau[k] = t
    return out
