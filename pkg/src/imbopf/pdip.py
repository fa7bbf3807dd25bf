"""Damped Newton inner loop for one homotopy sub-problem.

Each Newton step solves the reduced KKT system, recovers the bound
multiplier steps, limits every primal and dual variable with its own
damping factor, and then backtracks a common step scale on the infinity
norm of the perturbed KKT residual.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .formulation import (
    DegenerateVoltageError,
    Iterate,
    ParameterizedNetwork,
    generation_cost,
    interior_projection,
    refresh_auxiliaries,
)
from .kkt import (
    DELTA_MAX,
    DELTA_MIN,
    NotInteriorError,
    Perturbation,
    RegularizationExhausted,
    assemble_kkt,
    centered_epsilon,
    choose_regularization,
    inf_norm,
    is_interior,
    kkt_residual,
    recover_multiplier_steps,
    reduced_rhs,
    split_residual,
)
from .linsolve import SingularMatrixError, factor, solve

log = logging.getLogger(__name__)

__all__ = [
    "SolverOptions",
    "SubproblemResult",
    "StepDiagnostics",
    "LinearSolveFailed",
    "LineSearchFailed",
    "primal_damping",
    "dual_damping",
    "newton_iteration",
    "solve_subproblem",
    "residual_norms",
    "fresh_iterate",
]


class LinearSolveFailed(ArithmeticError):
    pass


class LineSearchFailed(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    tol_comp: float = 1e-6
    alpha_x: float = 0.995
    alpha_mu: float = 0.995
    max_newton: int = 200
    sigma: float = 0.1
    max_backtracks: int = 10
    ascent_retries: int = 3
    divergence_factor: float = 10.0
    delta_min: float = DELTA_MIN
    delta_max: float = DELTA_MAX
    damping: bool = True
    uniform_fallback: bool = True
    curvature_test: bool = True
    curvature_floor: float = 1e-10
    eps_gate: float = 0.0
    refresh_auxiliary: bool = True
    second_order_correction: bool = True
    # stall trigger: diverged when the residual falls by less than
    # (1 - stall_ratio) over stall_window iterations; 0 disables
    stall_window: int = 30
    stall_ratio: float = 0.9
    # extra Newton iterations at 0.1*tol once the final (v=0) sub-problem converges
    final_polish: int = 10
    # line-search merit: "l2" or "inf" norm of the perturbed KKT residual
    merit_norm: str = "inf"

    def __post_init__(self):
        if min(self.tol_primal, self.tol_dual, self.tol_comp) <= 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.alpha_x < 1 and 0 < self.alpha_mu < 1):
            raise ValueError("fraction-to-boundary constants must lie in (0, 1)")
        if self.max_newton < 0:
            raise ValueError("max_newton must be nonnegative")
        if self.merit_norm not in ("l2", "inf"):
            raise ValueError(f"merit_norm must be 'l2' or 'inf', got {self.merit_norm!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepDiagnostics:
    merit_before: float
    merit_after: float
    step_scale: float
    backtracks: int
    damping_min: float
    delta_used: float
    delta_next: float
    factorizations: int
    epsilon: float = 0.0
    kind: str = "full"  # full | soc | backtrack | uniform


@dataclass
class SubproblemResult:
    iterate: Iterate
    status: str  # converged | iteration-limit | diverged | linear-solve-failed
    iterations: int
    residual_history: list[tuple[float, float, float]] = field(default_factory=list)
    steps: list[StepDiagnostics] = field(default_factory=list)
    initial_norms: tuple[float, float, float] = (np.inf, np.inf, np.inf)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def primal_damping(x, dx, lower, upper, alpha_x: float) -> np.ndarray:
    """Per-variable factors in (0, 1] so that ``x + tau*dx`` stays strictly inside."""
    x = np.asarray(x, dtype=float)
    return kernels.primal_damping(x, np.asarray(dx, dtype=float),
                                  np.broadcast_to(np.asarray(lower, dtype=float), x.shape).copy(),
                                  np.broadcast_to(np.asarray(upper, dtype=float), x.shape).copy(),
                                  float(alpha_x))


def dual_damping(mu, dmu, alpha_mu: float) -> np.ndarray:
    """Per-multiplier factors in (0, 1] keeping ``mu + tau*dmu`` positive."""
    return kernels.dual_damping(np.asarray(mu, dtype=float), np.asarray(dmu, dtype=float),
                                float(alpha_mu))


def residual_norms(it: Iterate, pnet: ParameterizedNetwork, pert: Perturbation | None = None):
    """(dual, primal, complementarity) infinity norms; unperturbed when ``pert`` is None."""
    res = kkt_residual(it, pnet, pert)
    d, p, cu, cl = split_residual(res, pnet)
    return inf_norm(d), inf_norm(p), max(inf_norm(cu), inf_norm(cl))


def _is_interior(it: Iterate, pnet: ParameterizedNetwork) -> bool:
    return is_interior(it, pnet)


def _norm(res: np.ndarray, kind: str) -> float:
    return inf_norm(res) if kind == "inf" else float(np.linalg.norm(res))


def _merit(it: Iterate, pnet, pert, kind: str = "inf") -> float:
    try:
        val = _norm(kkt_residual(it, pnet, pert, check=False), kind)
    except DegenerateVoltageError:
        return np.inf
    return val if np.isfinite(val) else np.inf


def _limited_step(it, lo, hi, dx, dlam, dmu_u, dmu_l, opts):
    if not opts.damping:
        return (dx, dlam, dmu_u, dmu_l), 1.0
    tau_x = primal_damping(it.x, dx, lo, hi, opts.alpha_x)
    tau_u = dual_damping(it.mu_upper, dmu_u, opts.alpha_mu)
    tau_l = dual_damping(it.mu_lower, dmu_l, opts.alpha_mu)
    tmin = float(min(tau_x.min(initial=1.0), tau_u.min(initial=1.0), tau_l.min(initial=1.0)))
    return (tau_x * dx, dlam, tau_u * dmu_u, tau_l * dmu_l), tmin


def _trial(it, pnet, step, scale, opts) -> Iterate:
    sx, sy, su, sl = step
    x = it.x + scale * sx
    if opts.refresh_auxiliary:
        x = refresh_auxiliaries(pnet, x)
    return Iterate(x, it.lam + scale * sy, it.mu_upper + scale * su, it.mu_lower + scale * sl)


def _accept(it, pnet, pert, step, merit0, opts, scales):
    for k, scale in enumerate(scales):
        trial = _trial(it, pnet, step, scale, opts)
        if opts.damping and not _is_interior(trial, pnet):
            continue
        merit = _merit(trial, pnet, pert, opts.merit_norm)
        if merit < merit0:
            return trial, merit, scale, k
    return None


def newton_iteration(it: Iterate, pnet: ParameterizedNetwork, pert: Perturbation,
                     opts: SolverOptions = SolverOptions(), delta: float = 0.0):
    """One damped Newton step; returns ``(next_iterate, StepDiagnostics)``.

    Raises :class:`LinearSolveFailed` once regularization is exhausted and
    :class:`LineSearchFailed` when no backtracked step lowers the merit.
    """
    res = kkt_residual(it, pnet, pert)
    merit0 = _norm(res, opts.merit_norm)
    if merit0 == 0.0:
        return it.copy(), StepDiagnostics(0.0, 0.0, 0.0, 0, 1.0, delta, delta, 0)
    lo, hi = pnet.bounds()
    n = pnet.layout.n
    eps_max = float(np.max(pert.epsilon, initial=0.0))
    halvings = [0.5 ** k for k in range(opts.max_backtracks + 1)]
    factorizations = 0
    ascents = 0
    curvature_waived = False
    tried_plain = delta == 0.0
    while True:
        system = assemble_kkt(it, pnet, pert, delta, residual=res)
        try:
            fact = factor(system.matrix)
            factorizations += 1
            sol = solve(fact, system.rhs)
        except SingularMatrixError as exc:
            try:
                delta = choose_regularization("failed", delta, opts.delta_min, opts.delta_max)
            except RegularizationExhausted:
                raise LinearSolveFailed(f"KKT matrix singular after regularization: {exc}") from None
            continue
        dx, dlam = sol[:n], sol[n:]
        if opts.curvature_test and not curvature_waived:
            # inertia-free test: negative curvature along dx counts as ascent
            w = system.matrix[:n, :n]
            if float(dx @ (w @ dx)) < opts.curvature_floor * float(dx @ dx):
                try:
                    delta = choose_regularization("failed", delta, opts.delta_min, opts.delta_max)
                    continue
                except RegularizationExhausted:
                    curvature_waived = True
        dmu_u, dmu_l = recover_multiplier_steps(it, system, dx)
        step, damping_min = _limited_step(it, lo, hi, dx, dlam, dmu_u, dmu_l, opts)

        def done(found, kind):
            trial, merit, scale, k = found
            nxt = choose_regularization("ok", delta, opts.delta_min, opts.delta_max)
            return trial, StepDiagnostics(merit0, merit, scale, k, damping_min, delta, nxt,
                                          factorizations, eps_max, kind)

        found = _accept(it, pnet, pert, step, merit0, opts, halvings[:1])
        if found:
            return done(found, "full")
        if opts.second_order_correction:
            # re-solve with the residual of the rejected full step, same factors
            base = _trial(it, pnet, step, 1.0, opts)
            try:
                r1 = kkt_residual(base, pnet, pert, check=False)
                rhs1, cu1, cl1 = reduced_rhs(system, r1, pnet)
                sol2 = solve(fact, rhs1)
            except (DegenerateVoltageError, SingularMatrixError):
                sol2 = None
            if sol2 is not None and np.all(np.isfinite(sol2)):
                dx2 = (base.x - it.x) + sol2[:n]
                du2, dl2 = recover_multiplier_steps(it, system, sol2[:n], cu1, cl1)
                step2, _ = _limited_step(it, lo, hi, dx2, step[1] + sol2[n:],
                                         (base.mu_upper - it.mu_upper) + du2,
                                         (base.mu_lower - it.mu_lower) + dl2, opts)
                found = _accept(it, pnet, pert, step2, merit0, opts, halvings[:1])
                if found:
                    return done(found, "soc")
        found = _accept(it, pnet, pert, step, merit0, opts, halvings[1:])
        if found:
            trial, merit, scale, k = found
            return done((trial, merit, scale, k + 1), "backtrack")
        if opts.damping and opts.uniform_fallback and damping_min < 1.0:
            # a uniformly damped step keeps the Newton direction, so it is a
            # descent direction for the merit near scale 0
            uni = (damping_min * dx, damping_min * dlam, damping_min * dmu_u, damping_min * dmu_l)
            found = _accept(it, pnet, pert, uni, merit0, opts, halvings)
            if found:
                return done(found, "uniform")
        ascents += 1
        if delta > 0.0 and not tried_plain:
            # a shifted Hessian need not give a descent direction; retry unshifted once
            tried_plain = True
            delta = 0.0
            continue
        try:
            delta = choose_regularization("failed", delta, opts.delta_min, opts.delta_max)
        except RegularizationExhausted:
            raise LineSearchFailed("no merit decrease and regularization exhausted") from None
        if ascents > opts.ascent_retries:
            raise LineSearchFailed(f"no merit decrease after {ascents} regularized attempts;"
                                   f" delta={delta:.1e}")


def fresh_iterate(x: np.ndarray, pnet: ParameterizedNetwork, mu: float = 1.0,
                  margin: float = 1e-4) -> Iterate:
    """Project ``x`` into the interior and attach lam = 0, mu = ``mu`` on finite bounds."""
    lo, hi = pnet.bounds()
    x = interior_projection(x, lo, hi, margin)
    has_lo, has_hi = pnet.bound_sides()
    return Iterate(x, np.zeros(pnet.layout.m), np.where(has_hi, mu, 0.0), np.where(has_lo, mu, 0.0))


def solve_subproblem(start: Iterate, pnet: ParameterizedNetwork,
                     opts: SolverOptions = SolverOptions()) -> SubproblemResult:
    """Run Newton iterations until the unperturbed KKT norms meet tolerance."""
    it = start.copy()
    if not _is_interior(it, pnet):
        raise NotInteriorError("sub-problem start must be strictly interior")
    history: list[tuple[float, float, float]] = []
    steps: list[StepDiagnostics] = []
    eps_floor = 0.1 * opts.tol_comp
    nbound = len(pnet.layout.bounded)
    eps = None
    delta = 0.0
    failures = 0
    norms = residual_norms(it, pnet)
    initial = norms
    best = max(norms)
    status = "iteration-limit"
    k = 0
    while True:
        d, p, c = norms
        if d <= opts.tol_dual and p <= opts.tol_primal and c <= opts.tol_comp:
            status = "converged"
            break
        if k >= opts.max_newton:
            status = "iteration-limit"
            break
        target = centered_epsilon(it, pnet, opts.sigma, eps_floor)
        if eps is None or target > eps:
            eps = target
        elif eps > target and opts.eps_gate > 0:
            # only tighten once the current centered problem is nearly solved
            if _merit(it, pnet, Perturbation.uniform(eps, nbound), opts.merit_norm) <= opts.eps_gate * eps:
                eps = target
        else:
            eps = target
        pert = Perturbation.uniform(eps, nbound)
        try:
            it_next, diag = newton_iteration(it, pnet, pert, opts, delta)
        except LinearSolveFailed as exc:
            log.debug("v=%g: %s", pnet.v, exc)
            status = "linear-solve-failed"
            break
        except LineSearchFailed as exc:
            log.debug("v=%g: %s", pnet.v, exc)
            failures += 1
            delta = max(delta * 10.0, opts.delta_min)
            if failures >= 2:
                status = "diverged"
                break
            continue
        except DegenerateVoltageError:
            status = "diverged"
            break
        failures = 0
        k += 1
        it = it_next
        delta = diag.delta_next
        norms = residual_norms(it, pnet)
        history.append(norms)
        steps.append(diag)
        cur = max(norms)
        if cur > opts.divergence_factor * best:
            status = "diverged"
            break
        best = min(best, cur)
        if opts.stall_window and k >= opts.stall_window:
            then = max(history[k - opts.stall_window - 1]) if k > opts.stall_window else max(initial)
            if cur > opts.stall_ratio * then:
                # too little progress over the window: hand back to the controller
                status = "diverged"
                break
    return SubproblemResult(it, status, k, history, steps, initial)


def generation_cost_of(it: Iterate, pnet: ParameterizedNetwork) -> float:
    return generation_cost(pnet, it.x)
