"""Outer incremental-model-building loop: march the homotopy factor from 1 to 0."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .formulation import (
    HomotopyParams,
    Iterate,
    ParameterizedNetwork,
    VariableLayout,
    apply_homotopy,
    cost_scale,
    equality_residuals,
    flat_primal,
    generation_cost,
    interior_projection,
    objective_value_gradient,
)
from .grid import Network
from .matpower import ConvergenceTrace, TraceRecord
from .pdip import SolverOptions, SubproblemResult, fresh_iterate, solve_subproblem

log = logging.getLogger(__name__)

__all__ = [
    "ControllerSettings",
    "ControllerState",
    "HomotopyAbort",
    "SolveReport",
    "Verification",
    "VerificationFailed",
    "initial_iterate",
    "next_factor",
    "solve_acopf",
    "verify_report",
]


class HomotopyAbort(RuntimeError):
    """The step size fell below ``dv_min`` (or the first sub-problem failed)."""


@dataclass(frozen=True)
class ControllerSettings:
    dv_init: float = 0.1
    dv_min: float = 1e-6
    dv_max: float = 0.5
    growth: float = 2.0
    shrink: float = 0.5

    def __post_init__(self):
        if not 0 < self.dv_min <= self.dv_init <= self.dv_max <= 1:
            raise ValueError("need 0 < dv_min <= dv_init <= dv_max <= 1")
        if self.growth < 1 or not 0 < self.shrink < 1:
            raise ValueError("growth must be >= 1 and shrink in (0, 1)")


@dataclass
class ControllerState:
    """``v_current`` is the last accepted factor (None before the first);
    ``v_trial`` the factor being attempted; ``dv`` the next advance."""

    v_current: float | None
    v_trial: float
    dv: float
    settings: ControllerSettings = field(default_factory=ControllerSettings)
    last_accepted: Iterate | None = None


def next_factor(cs: ControllerState, outcome: str) -> ControllerState:
    """Advance or retreat the homotopy factor after a sub-problem.

    ``outcome`` is the sub-problem status.  Raises :class:`HomotopyAbort`
    when the shrunken step drops below ``dv_min``.
    """
    st = cs.settings
    if outcome == "converged":
        v_acc = cs.v_trial
        v_next = max(0.0, v_acc - cs.dv)
        dv = min(cs.dv * st.growth, st.dv_max)
        return ControllerState(v_acc, v_next, dv, st, cs.last_accepted)
    if cs.v_current is None:
        raise HomotopyAbort(f"first sub-problem at v={cs.v_trial} did not converge ({outcome})")
    step = cs.v_current - cs.v_trial
    dv = step * st.shrink
    if dv < st.dv_min:
        raise HomotopyAbort(f"homotopy step {dv:.3g} below dv_min={st.dv_min:.3g} at v={cs.v_current:.6g}")
    return ControllerState(cs.v_current, max(0.0, cs.v_current - dv), dv, st, cs.last_accepted)


def initial_iterate(pnet: ParameterizedNetwork) -> Iterate:
    """Flat start for the trivial v = 1 sub-problem."""
    return fresh_iterate(flat_primal(pnet), pnet)


def warm_start(prev: Iterate, pnet: ParameterizedNetwork, margin: float = 1e-4,
               mu_floor: float = 1e-12) -> Iterate:
    """Carry a solution over to a new factor.

    Entries still strictly inside the moved bounds are kept as they are;
    only entries the bounds have passed are pulled back inside, so the
    complementarity gap (and with it the centering target) is not inflated.
    """
    lo, hi = pnet.bounds()
    x = prev.x.copy()
    outside = ~((x > lo) & (x < hi))
    if outside.any():
        proj = interior_projection(prev.x, lo, hi, margin)
        x[outside] = proj[outside]
    has_lo, has_hi = pnet.bound_sides()
    return Iterate(x, prev.lam.copy(), np.where(has_hi, np.maximum(prev.mu_upper, mu_floor), 0.0),
                   np.where(has_lo, np.maximum(prev.mu_lower, mu_floor), 0.0))


@dataclass
class Verification:
    passed: bool
    max_kcl_residual: float
    max_power_mismatch: float
    max_bound_violation: float
    max_flow_violation: float
    violations: list[str] = field(default_factory=list)
    # nonzero when KCL was checked with relaxed slack injections in place
    relaxation: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


class VerificationFailed(AssertionError):
    def __init__(self, verdict: Verification):
        super().__init__("verification failed: " + "; ".join(verdict.violations[:10]))
        self.verdict = verdict


@dataclass
class SolveReport:
    status: str  # converged | infeasible-path | aborted
    objective: float
    penalized_objective: float
    iterate: Iterate
    homotopy_steps: int
    total_newton: int
    trace: ConvergenceTrace
    options_echo: dict
    network: Network
    layout: VariableLayout
    final_v: float
    accepted_factors: list[float] = field(default_factory=list)
    slack_injection: float = 0.0
    wall_time: float = 0.0
    message: str = ""
    verification: Verification | None = None
    subproblems: list[SubproblemResult] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def voltages(self) -> np.ndarray:
        x = self.iterate.x
        return x[self.layout.vr] + 1j * x[self.layout.vi]

    def dispatch(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.iterate.x
        return x[self.layout.pg], x[self.layout.qg]

    def branch_flows(self, binding_tol: float = 1e-4) -> list[dict]:
        """Terminal power flows, series current and limit status for each branch."""
        net = self.network
        pnet = apply_homotopy(net, HomotopyParams(v=self.final_v), self.layout)
        volt = self.voltages()
        lo, hi = pnet.bounds()
        lay = self.layout
        mu_map = {int(j): k for k, j in enumerate(lay.bounded)}
        lim_pos = {int(br): k for k, br in enumerate(lay.limited)}
        out = []
        for k, br in enumerate(net.branches):
            f, t = pnet.br_from[k], pnet.br_to[k]
            ys = complex(pnet.g_hat[k], pnet.b_hat[k])
            tap = pnet.tap_hat[k] * complex(math.cos(pnet.shift_hat[k]), math.sin(pnet.shift_hat[k]))
            ych = 0.5j * pnet.b_charge[k]
            i_f = (ys + ych) / (pnet.tap_hat[k] ** 2) * volt[f] - ys / tap.conjugate() * volt[t]
            i_t = -ys / tap * volt[f] + (ys + ych) * volt[t]
            s_f = volt[f] * i_f.conjugate()
            s_t = volt[t] * i_t.conjugate()
            i_series = abs(ys * (volt[f] / tap - volt[t]))
            rec = {"p_from": s_f.real, "q_from": s_f.imag, "p_to": s_t.real, "q_to": s_t.imag,
                   "series_current": i_series, "binding": False, "multiplier": 0.0}
            if k in lim_pos:
                j = lay.flow[lim_pos[k]]
                cap = hi[j]
                rec["binding"] = bool(cap - self.iterate.x[j] <= binding_tol * max(cap, 1.0))
                rec["multiplier"] = float(self.iterate.mu_upper[mu_map[int(j)]])
                rec["flow_squared"] = float(self.iterate.x[j])
            out.append(rec)
        return out


def _slack_injection(pnet: ParameterizedNetwork, x: np.ndarray) -> float:
    lay = pnet.layout
    w = pnet.params.slack_coefficient
    return float(w * np.max(np.hypot(x[lay.slack_r], x[lay.slack_i]), initial=0.0))


def solve_acopf(net: Network, h: HomotopyParams = HomotopyParams(), opts: SolverOptions = SolverOptions(),
                homotopy_enabled: bool = True, controller: ControllerSettings = ControllerSettings(),
                verify: bool = True, infeasible_threshold: float = 1e-4) -> SolveReport:
    """Solve the AC-OPF of a validated network from a flat start."""
    t0 = time.perf_counter()
    layout = VariableLayout(net)
    scale = cost_scale(net)
    trace = ConvergenceTrace(params={
        "gamma": h.gamma, "kappa": h.kappa, "load_floor": h.load_floor,
        "slack_weight": h.slack_weight, "relaxation": h.relaxation, "cost_scale": scale,
        "homotopy": homotopy_enabled, **asdict(controller), **opts.as_dict(),
    })
    options_echo = dict(trace.params)

    v0 = 1.0 if homotopy_enabled else 0.0
    cs = ControllerState(None, v0, controller.dv_init, controller)
    last: Iterate | None = None
    last_pnet: ParameterizedNetwork | None = None
    accepted: list[float] = []
    subproblems: list[SubproblemResult] = []
    total_newton = 0
    step_no = 0
    status = "aborted"
    message = ""
    while True:
        pnet = apply_homotopy(net, h.at(cs.v_trial), layout, scale)
        start = initial_iterate(pnet) if last is None else warm_start(last, pnet)
        try:
            result = solve_subproblem(start, pnet, opts)
        except ArithmeticError as exc:  # degenerate start
            result = SubproblemResult(start, "diverged", 0)
            log.debug("sub-problem at v=%g failed: %s", cs.v_trial, exc)
        if result.converged and cs.v_trial == 0.0 and opts.final_polish > 0:
            result = _polish(result, pnet, opts)
        subproblems.append(result)
        total_newton += result.iterations
        ok = result.converged
        _record(trace, step_no, pnet, result, ok)
        log.info("v=%.6g status=%s newton=%d", cs.v_trial, result.status, result.iterations)
        step_no += 1
        if ok:
            last, last_pnet = result.iterate, pnet
            accepted.append(cs.v_trial)
            if cs.v_trial == 0.0:
                status = "converged"
                break
        if not homotopy_enabled:
            message = f"plain solve ended with status {result.status}"
            last = last or result.iterate
            last_pnet = last_pnet or pnet
            break
        try:
            cs = next_factor(cs, result.status)
        except HomotopyAbort as exc:
            message = str(exc)
            if last is None:
                last, last_pnet = result.iterate, pnet
            break

    x = last.x
    slack = _slack_injection(last_pnet, x)
    if status != "converged" and homotopy_enabled and accepted and slack > infeasible_threshold:
        status = "infeasible-path"
    final_pnet = last_pnet
    penalized, _ = objective_value_gradient(last, final_pnet)
    report = SolveReport(
        status=status,
        objective=generation_cost(final_pnet, x),
        penalized_objective=penalized * scale,
        iterate=last, homotopy_steps=len(accepted), total_newton=total_newton, trace=trace,
        options_echo=options_echo, network=net, layout=layout, final_v=final_pnet.v,
        accepted_factors=accepted, slack_injection=slack, wall_time=time.perf_counter() - t0,
        message=message, subproblems=subproblems,
    )
    if status == "converged":
        final = subproblems[-1]
        d, p, c = final.residual_history[-1] if final.residual_history else final.initial_norms
        if not (d <= opts.tol_dual and p <= opts.tol_primal and c <= opts.tol_comp):
            raise AssertionError("converged status without residuals at tolerance")
        if verify:
            report.verification = verify_report(report, net, raise_on_failure=False)
    return report


def _polish(result: SubproblemResult, pnet: ParameterizedNetwork, opts: SolverOptions) -> SubproblemResult:
    """Tighten the final sub-problem; keep the extra iterations only if they converge."""
    tight = replace(opts, tol_primal=0.1 * opts.tol_primal, tol_dual=0.1 * opts.tol_dual,
                    tol_comp=0.1 * opts.tol_comp, max_newton=opts.final_polish, stall_window=0)
    try:
        extra = solve_subproblem(result.iterate, pnet, tight)
    except ArithmeticError:
        return result
    if not extra.converged or extra.iterations == 0:
        return result
    return SubproblemResult(extra.iterate, "converged", result.iterations + extra.iterations,
                            result.residual_history + extra.residual_history,
                            result.steps + extra.steps, result.initial_norms)


def _record(trace: ConvergenceTrace, step_no: int, pnet: ParameterizedNetwork,
            result: SubproblemResult, accepted: bool):
    v = pnet.v
    trace.append(TraceRecord(step_no, v, 0, max(result.initial_norms), float("nan"), accepted, 1.0))
    x_hist = result.iterate.x
    for k, (norms, diag) in enumerate(zip(result.residual_history, result.steps), start=1):
        last = k == len(result.residual_history)
        trace.append(TraceRecord(
            homotopy_step=step_no, v=v, newton_iteration=k, kkt_residual_inf_norm=max(norms),
            objective=generation_cost(pnet, x_hist) if last else float("nan"),
            step_accepted=accepted, damping_min=diag.damping_min, regularization=diag.delta_used,
            slack_injection_norm=_slack_injection(pnet, x_hist) if last else float("nan"),
        ))


def verify_report(report: SolveReport, net: Network, tol: float = 1e-6,
                  raise_on_failure: bool = True) -> Verification:
    """Re-check the original (v = 0) constraints at the reported point.

    Uses the formulation's KCL rows, an independent power-mismatch
    evaluation, direct bound checks on |V|, P and Q, and branch series
    currents recomputed from the voltages.
    """
    from .oracle import power_mismatch

    layout = report.layout
    x = report.iterate.x
    relax = report.options_echo.get("relaxation") or 0.0
    pnet = apply_homotopy(net, HomotopyParams(v=0.0, relaxation=relax or None), layout)
    violations: list[str] = []
    res = equality_residuals(x, pnet)
    kcl = np.concatenate([res[layout.kcl_r], res[layout.kcl_i]])
    max_kcl = float(np.abs(kcl).max(initial=0.0))
    if max_kcl > tol:
        k = int(np.argmax(np.abs(kcl))) % layout.n_bus
        violations.append(f"kcl: bus {net.buses[k].index} residual {max_kcl:.3e}")
    dp, dq = power_mismatch(report.iterate, net)
    if relax:
        # relaxed slack currents act as extra injections
        volt = x[layout.vr] + 1j * x[layout.vi]
        s_sl = volt * np.conj(relax * (x[layout.slack_r] + 1j * x[layout.slack_i]))
        dp, dq = dp + s_sl.real, dq + s_sl.imag
    mismatch = float(max(np.abs(dp).max(initial=0.0), np.abs(dq).max(initial=0.0)))
    if mismatch > tol:
        violations.append(f"power-mismatch: {mismatch:.3e} p.u.")

    vm = np.abs(x[layout.vr] + 1j * x[layout.vi])
    viol = 0.0
    for k, bus in enumerate(net.buses):
        over = max(bus.v_min - vm[k], vm[k] - bus.v_max)
        viol = max(viol, over)
        if over > tol:
            violations.append(f"bounds: bus {bus.index} |V|={vm[k]:.6f} outside [{bus.v_min}, {bus.v_max}]")
    pg, qg = x[layout.pg], x[layout.qg]
    for k, gen in enumerate(net.generators):
        over = max(gen.p_min - pg[k], pg[k] - gen.p_max, gen.q_min - qg[k], qg[k] - gen.q_max)
        viol = max(viol, over)
        if over > tol:
            violations.append(f"bounds: generator {k} at bus {gen.bus} (P={pg[k]:.6f}, Q={qg[k]:.6f})")
    flow_viol = 0.0
    volt = x[layout.vr] + 1j * x[layout.vi]
    pos = net.bus_position
    for k, br in enumerate(net.branches):
        if not br.limited:
            continue
        tap = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
        vf, vt = volt[pos[br.from_bus]], volt[pos[br.to_bus]]
        i_s = abs(complex(br.g, br.b) * (vf / tap - vt))
        if br.current_limit is not None:
            over = i_s - br.current_limit
        else:
            over = abs(vf) / br.tap * i_s - br.power_limit
        flow_viol = max(flow_viol, over)
        if over > tol:
            violations.append(f"flow: branch {k} ({br.from_bus}-{br.to_bus}) exceeds limit by {over:.3e}")
    verdict = Verification(not violations, max_kcl, mismatch, viol, flow_viol, violations, float(relax))
    if raise_on_failure and not verdict.passed:
        raise VerificationFailed(verdict)
    return verdict
