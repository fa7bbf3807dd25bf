"""Perturbed KKT residual, reduced Newton system and regularization control."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .formulation import (
    Iterate,
    ParameterizedNetwork,
    equality_jacobian,
    equality_residuals,
    lagrangian_hessian,
    objective_value_gradient,
)
from .sparse import Pattern

__all__ = [
    "Perturbation",
    "KktSystem",
    "NotInteriorError",
    "RegularizationExhausted",
    "kkt_residual",
    "split_residual",
    "assemble_kkt",
    "assemble_full_kkt",
    "recover_multiplier_steps",
    "reduced_rhs",
    "choose_regularization",
    "is_interior",
    "check_interior",
    "DELTA_MIN",
    "DELTA_MAX",
]

DELTA_MIN = 1e-8
DELTA_MAX = 1e8


class NotInteriorError(ValueError):
    """Iterate touches a bound or carries a nonpositive bound multiplier."""


class RegularizationExhausted(ArithmeticError):
    pass


@dataclass(frozen=True)
class Perturbation:
    epsilon: np.ndarray

    @classmethod
    def uniform(cls, value: float, n_bounds: int) -> "Perturbation":
        return cls(np.full(n_bounds, float(value)))


@dataclass
class KktSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    elimination_data: dict
    regularization: float


def _bound_data(it: Iterate, pnet: ParameterizedNetwork):
    lo, hi = pnet.bounds()
    b = pnet.layout.bounded
    xb = it.x[b]
    return b, xb, lo[b], hi[b]


def is_interior(it: Iterate, pnet: ParameterizedNetwork) -> bool:
    _, xb, lo, hi = _bound_data(it, pnet)
    has_lo, has_hi = pnet.bound_sides()
    return bool(np.all(xb < hi) and np.all(xb > lo)
                and np.all(it.mu_upper[has_hi] > 0) and np.all(it.mu_lower[has_lo] > 0)
                and not np.any(it.mu_upper[~has_hi]) and not np.any(it.mu_lower[~has_lo]))


def check_interior(it: Iterate, pnet: ParameterizedNetwork) -> None:
    """Raise unless x is strictly inside its bounds and every active multiplier is positive.

    Multipliers of infinite bounds must be exactly zero.
    """
    _, xb, lo, hi = _bound_data(it, pnet)
    if np.any(xb >= hi) or np.any(xb <= lo):
        k = int(np.argmax((xb >= hi) | (xb <= lo)))
        raise NotInteriorError(f"bounded primal #{k} = {xb[k]!r} not inside ({lo[k]!r}, {hi[k]!r})")
    has_lo, has_hi = pnet.bound_sides()
    if np.any(it.mu_upper[has_hi] <= 0) or np.any(it.mu_lower[has_lo] <= 0):
        raise NotInteriorError("bound multipliers must be strictly positive")
    if np.any(it.mu_upper[~has_hi]) or np.any(it.mu_lower[~has_lo]):
        raise NotInteriorError("multipliers of infinite bounds must be zero")


def kkt_residual(it: Iterate, pnet: ParameterizedNetwork, pert: Perturbation | None = None,
                 check: bool = True) -> np.ndarray:
    """Stack [dual; primal; upper complementarity; lower complementarity]."""
    if check:
        check_interior(it, pnet)
    b, xb, lo, hi = _bound_data(it, pnet)
    eps = 0.0 if pert is None else pert.epsilon
    _, grad = objective_value_gradient(it, pnet)
    jac = equality_jacobian(it, pnet)
    dual = grad + jac.T @ it.lam
    np.add.at(dual, b, it.mu_upper - it.mu_lower)
    primal = equality_residuals(it, pnet)
    has_lo, has_hi = pnet.bound_sides()
    with np.errstate(invalid="ignore"):
        comp_u = np.where(has_hi, it.mu_upper * (xb - hi) + eps, 0.0)
        comp_l = np.where(has_lo, it.mu_lower * (xb - lo) - eps, 0.0)
    return np.concatenate([dual, primal, comp_u, comp_l])


def split_residual(res: np.ndarray, pnet: ParameterizedNetwork):
    """Split a stacked residual into (dual, primal, comp_upper, comp_lower)."""
    n, m = pnet.layout.n, pnet.layout.m
    nb = len(pnet.layout.bounded)
    return res[:n], res[n:n + m], res[n + m:n + m + nb], res[n + m + nb:]


class _KktStructure:
    def __init__(self, pnet: ParameterizedNetwork, hess: sp.csc_matrix, jac: sp.csc_matrix):
        n, m = pnet.layout.n, pnet.layout.m
        hc = hess.tocoo()
        jc = jac.tocoo()
        diag = np.arange(n)
        self.rows = np.concatenate([hc.row, diag, n + jc.row, jc.col])
        self.cols = np.concatenate([hc.col, diag, jc.col, n + jc.row])
        self.pattern = Pattern(self.rows, self.cols, (n + m, n + m))


def _kkt_structure(pnet, hess, jac) -> _KktStructure:
    st = pnet._cache.get("kkt")
    if st is None:
        st = pnet._cache["kkt"] = _KktStructure(pnet, hess, jac)
    return st


def assemble_kkt(it: Iterate, pnet: ParameterizedNetwork, pert: Perturbation | None,
                 delta: float = 0.0, residual: np.ndarray | None = None) -> KktSystem:
    """Reduced symmetric system ``[[H + Sigma + delta I, J^T], [J, 0]]``.

    Bound multiplier steps are eliminated; ``elimination_data`` carries what
    :func:`recover_multiplier_steps` needs to rebuild them.
    """
    check_interior(it, pnet)
    if residual is None:
        residual = kkt_residual(it, pnet, pert, check=False)
    r_dual, r_primal, c_u, c_l = split_residual(residual, pnet)
    b, xb, lo, hi = _bound_data(it, pnet)
    n = pnet.layout.n
    gap_u = hi - xb
    gap_l = xb - lo
    sigma_b = it.mu_upper / gap_u + it.mu_lower / gap_l
    sigma = np.zeros(n)
    np.add.at(sigma, b, sigma_b)
    hess = lagrangian_hessian(it, pnet)
    jac = equality_jacobian(it, pnet)
    st = _kkt_structure(pnet, hess, jac)
    # triplet order in a csc .tocoo() matches the stored data order
    vals = np.concatenate([hess.data, sigma + delta, jac.data, jac.data])
    mat = st.pattern.assemble(vals)
    elim = {"bounded": b, "gap_upper": gap_u, "gap_lower": gap_l, "comp_upper": c_u,
            "comp_lower": c_l, "sigma": sigma, "n": n}
    rhs = _reduce(elim, r_dual, r_primal, c_u, c_l)
    return KktSystem(mat, rhs, elim, float(delta))


def _reduce(elim, r_dual, r_primal, c_u, c_l) -> np.ndarray:
    rhs_x = -r_dual.copy()
    np.add.at(rhs_x, elim["bounded"], -c_u / elim["gap_upper"] - c_l / elim["gap_lower"])
    return np.concatenate([rhs_x, -r_primal])


def reduced_rhs(system: KktSystem, residual: np.ndarray, pnet: ParameterizedNetwork):
    """Reduced right-hand side for another stacked residual, reusing the eliminated matrix.

    Returns ``(rhs, comp_upper, comp_lower)``; pass the two complementarity
    parts to :func:`recover_multiplier_steps` to rebuild the bound steps.
    """
    r_dual, r_primal, c_u, c_l = split_residual(residual, pnet)
    return _reduce(system.elimination_data, r_dual, r_primal, c_u, c_l), c_u, c_l


def recover_multiplier_steps(it: Iterate, system: KktSystem, dx: np.ndarray,
                             comp_upper=None, comp_lower=None):
    e = system.elimination_data
    c_u = e["comp_upper"] if comp_upper is None else comp_upper
    c_l = e["comp_lower"] if comp_lower is None else comp_lower
    dxb = dx[e["bounded"]]
    dmu_u = (c_u + it.mu_upper * dxb) / e["gap_upper"]
    dmu_l = (-c_l - it.mu_lower * dxb) / e["gap_lower"]
    return dmu_u, dmu_l


def assemble_full_kkt(it: Iterate, pnet: ParameterizedNetwork, pert: Perturbation | None,
                      delta: float = 0.0):
    """Unreduced Newton matrix over [dx; dlam; dmu_upper; dmu_lower] and its rhs."""
    check_interior(it, pnet)
    res = kkt_residual(it, pnet, pert, check=False)
    b, xb, lo, hi = _bound_data(it, pnet)
    n, m, nb = pnet.layout.n, pnet.layout.m, len(b)
    hess = lagrangian_hessian(it, pnet) + delta * sp.identity(n, format="csc")
    jac = equality_jacobian(it, pnet)
    sel = sp.csc_matrix((np.ones(nb), (b, np.arange(nb))), shape=(n, nb))
    has_lo, has_hi = pnet.bound_sides()
    # rows of infinite bounds reduce to d(mu) = 0
    mat = sp.bmat([
        [hess, jac.T, sel, -sel],
        [jac, None, None, None],
        [sp.diags(it.mu_upper) @ sel.T, None, sp.diags(np.where(has_hi, xb - hi, 1.0)), None],
        [sp.diags(it.mu_lower) @ sel.T, None, None, sp.diags(np.where(has_lo, xb - lo, 1.0))],
    ], format="csc")
    return mat, -res


def choose_regularization(solve_outcome: str, delta_prev: float, delta_min: float = DELTA_MIN,
                          delta_max: float = DELTA_MAX) -> float:
    """Next Hessian shift after a solve.

    ``solve_outcome`` is ``"ok"`` (factored and the step reduced the merit)
    or ``"failed"`` (factorization failure or no merit decrease).
    """
    if solve_outcome == "ok":
        if delta_prev <= 0.0:
            return 0.0
        nxt = delta_prev / 3.0
        return nxt if nxt >= delta_min else 0.0
    if solve_outcome != "failed":
        raise ValueError(f"unknown solve outcome {solve_outcome!r}")
    nxt = max(delta_min, 10.0 * delta_prev)
    if nxt >= delta_max * (1.0 - 1e-12):
        raise RegularizationExhausted(f"regularization would reach {nxt:.1e} >= {delta_max:.1e}")
    return nxt


def inf_norm(v: np.ndarray) -> float:
    return float(np.abs(v).max(initial=0.0))


def complementarity_gap(it: Iterate, pnet: ParameterizedNetwork) -> float:
    _, xb, lo, hi = _bound_data(it, pnet)
    has_lo, has_hi = pnet.bound_sides()
    return float(it.mu_upper[has_hi] @ (hi - xb)[has_hi] + it.mu_lower[has_lo] @ (xb - lo)[has_lo])


def centered_epsilon(it: Iterate, pnet: ParameterizedNetwork, sigma: float, floor: float) -> float:
    has_lo, has_hi = pnet.bound_sides()
    count = int(has_lo.sum() + has_hi.sum())
    if count == 0:
        return 0.0
    return max(sigma * complementarity_gap(it, pnet) / count, floor)

