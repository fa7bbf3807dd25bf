"""Pure-numpy reference implementations of the hot per-iteration kernels.

The compiled module ``imbopf._kernels`` exposes the same functions with the
same signatures; :mod:`imbopf.kernels` picks one at import time.
"""

import numpy as np


def scatter_add(slot, values, nnz):
    """Sum ``values`` into ``nnz`` buckets given by ``slot``."""
    return np.bincount(slot, weights=values, minlength=nnz)


def bus_injection(vr, vi, p, q, lam_r, lam_i):
    """Current injected by a constant-power source, with derivatives.

    For every bus the injected current is ``conj(S / V)`` with
    ``S = p + jq``.  Returns a tuple of arrays

    ``(hr, hi, dr_dvr, dr_dvi, hess_rr, hess_ri, hess_ii, cp, dp)``

    where ``dhi/dvr = dr_dvi`` and ``dhi/dvi = -dr_dvr``; ``hess_*`` are the
    voltage-voltage second derivatives of ``lam_r*hr + lam_i*hi``; and the
    mixed voltage/power terms follow from ``cp = (vr^2 - vi^2)/s^2`` and
    ``dp = 2 vr vi / s^2``.
    """
    a = vr
    b = vi
    s = a * a + b * b
    s2 = s * s
    s3 = s2 * s
    hr = (p * a + q * b) / s
    hi = (p * b - q * a) / s
    u = p * (b * b - a * a) - 2.0 * q * a * b
    w = q * (a * a - b * b) - 2.0 * p * a * b
    dr_dvr = u / s2
    dr_dvi = w / s2
    ua = -2.0 * p * a - 2.0 * q * b
    ub = 2.0 * p * b - 2.0 * q * a
    haa = (ua * s - 4.0 * a * u) / s3
    hab = (ub * s - 4.0 * b * u) / s3
    # hr is harmonic: hr_bb = -hr_aa; hi_aa = hr_ab, hi_ab = -hr_aa, hi_bb = -hr_ab
    hess_rr = lam_r * haa + lam_i * hab
    hess_ri = lam_r * hab - lam_i * haa
    hess_ii = -lam_r * haa - lam_i * hab
    cp = (a * a - b * b) / s2
    dp = 2.0 * a * b / s2
    return hr, hi, dr_dvr, dr_dvi, hess_rr, hess_ri, hess_ii, cp, dp


def primal_damping(x, dx, lower, upper, alpha):
    """Per-variable step limits keeping ``lower < x + tau*dx < upper``."""
    tau = np.ones_like(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        up = (dx > 0) & np.isfinite(upper)
        tau[up] = np.minimum(1.0, alpha * (upper[up] - x[up]) / dx[up])
        lo = (dx < 0) & np.isfinite(lower)
        tau[lo] = np.minimum(1.0, alpha * (lower[lo] - x[lo]) / dx[lo])
    return tau


def dual_damping(mu, dmu, alpha):
    """Per-multiplier step limits keeping ``mu + tau*dmu > 0``."""
    tau = np.ones_like(mu)
    neg = dmu < 0
    tau[neg] = np.minimum(1.0, -alpha * mu[neg] / dmu[neg])
    return tau
