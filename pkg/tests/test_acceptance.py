"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import functools
import math
import time

import numpy as np
import pytest

from imbopf import ControllerSettings, HomotopyParams, cli, solve_acopf, verify_report
from imbopf.formulation import apply_homotopy, cost_scale
from imbopf.homotopy import initial_iterate
from imbopf.kkt import Perturbation, is_interior
from imbopf.matpower import read_trace, write_trace
from imbopf.oracle import brute_force_optimum, finite_diff_check, random_interior_iterate
from imbopf.pdip import dual_damping, newton_iteration, primal_damping

from conftest import ALL_CASES, bundled, one_bus, solved, three_bus_limited, two_bus

PEGASE_OBJECTIVE = 4.58e5
PEGASE_ITERATIONS = 243
# case2infeasible is covered by the infeasible-mode test and, relaxed, by the path and verification audits
FEASIBLE = list(ALL_CASES)
RELAXED = HomotopyParams(relaxation=1e-2)


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, detail


@functools.lru_cache(maxsize=None)
def timed_pegase():
    t0 = time.perf_counter()
    rep = solve_acopf(bundled("case2869pegase"))
    return rep, time.perf_counter() - t0


def report_for(name):
    if name == "case2869pegase":
        return timed_pegase()[0]
    return solved(name)


@functools.lru_cache(maxsize=None)
def relaxed_infeasible():
    return solve_acopf(bundled("case2infeasible"), RELAXED)


@pytest.mark.slow
def test_criterion_01_pegase_reproduction(capsys):
    rep, wall = timed_pegase()
    rel = abs(rep.objective - PEGASE_OBJECTIVE) / PEGASE_OBJECTIVE
    ok = rep.converged and rel <= 0.01 and wall <= 600
    soft = "within" if rep.total_newton <= 5 * PEGASE_ITERATIONS else "outside"
    verdict(capsys, 1, "case2869pegase from flat start", ok,
            f"status {rep.status}, objective {rep.objective:.6g} vs {PEGASE_OBJECTIVE:.3g} "
            f"(rel. diff {rel:.1%}, limit 1%), {wall:.0f} s (limit 600 s), "
            f"{rep.total_newton} Newton iterations ({soft} 5x {PEGASE_ITERATIONS}, soft gate)")


def test_criterion_02_larger_rows_not_gated(capsys):
    large = ("case9241pegase", "case13659pegase", "ACTIVSg", "SyntheticUSA")
    bundled_names = set(ALL_CASES)
    ok = not any(any(tag in name for tag in large) for name in bundled_names)
    verdict(capsys, 2, "larger rows are benchmarks only", ok,
            "no larger case is bundled or gated; criteria 4 and 7 carry the substitute property suites")


def test_criterion_03_oracle_optimality(capsys):
    cases = {"1-bus": one_bus(), "2-bus": two_bus(), "3-bus limited": three_bus_limited(),
             "case2bus": bundled("case2bus"), "case3congested": bundled("case3congested")}
    worst, parts = 0.0, []
    for label, net in cases.items():
        ref = brute_force_optimum(net, resolution=1e-3)
        rep = solve_acopf(net)
        rel = abs(rep.objective - ref.objective) / abs(ref.objective) if rep.converged else math.inf
        worst = max(worst, rel)
        parts.append(f"{label} {rel:.1e}")
    verdict(capsys, 3, "solver matches brute-force oracle within 0.1%", worst <= 1e-3,
            f"{len(cases)} cases, worst rel. diff {worst:.2e} ({', '.join(parts)})")


@pytest.mark.slow
def test_criterion_04_derivatives(capsys):
    rng = np.random.default_rng(2024)
    worst = {"gradient": 0.0, "jacobian": 0.0, "hessian_vector": 0.0}
    count = 0
    for name in ("case9", "case118"):
        net = bundled(name)
        scale = cost_scale(net)
        for _ in range(20):
            pnet = apply_homotopy(net, HomotopyParams(v=float(rng.uniform(0.0, 1.0))), obj_scale=scale)
            rep = finite_diff_check(random_interior_iterate(pnet, rng), pnet, step=1e-6,
                                    seed=int(rng.integers(1 << 30)))
            for key in worst:
                worst[key] = max(worst[key], getattr(rep, key))
            if rep.hessian is not None:
                worst["hessian_vector"] = max(worst["hessian_vector"], rep.hessian)
            count += 1
    ok = worst["gradient"] <= 1e-5 and worst["jacobian"] <= 1e-5 and worst["hessian_vector"] <= 1e-4
    verdict(capsys, 4, "finite-difference derivative check", ok,
            f"{count} iterates on case9 and case118: gradient {worst['gradient']:.1e} (<=1e-5), "
            f"Jacobian {worst['jacobian']:.1e} (<=1e-5), Hessian {worst['hessian_vector']:.1e} (<=1e-4)")


def _rel_diff(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def test_criterion_05_homotopy_identity(capsys):
    worst0, worst1 = 0.0, 0.0
    kappa = HomotopyParams().kappa
    for name in ALL_CASES + ["case2infeasible"]:
        net = bundled(name)
        p0 = apply_homotopy(net, HomotopyParams(v=0.0))
        brs, gens = net.branches, net.generators
        pairs = [
            (p0.g_hat, [b.g for b in brs]), (p0.b_hat, [b.b for b in brs]),
            (p0.b_charge, [b.b_charge for b in brs]), (p0.tap_hat, [b.tap for b in brs]),
            (p0.shift_hat, [b.shift for b in brs]),
            (p0.g_sh_hat, [s.g_sh for s in net.shunts]), (p0.b_sh_hat, [s.b_sh for s in net.shunts]),
            (p0.p_min, [g.p_min for g in gens]), (p0.p_max, [g.p_max for g in gens]),
            (p0.q_min, [g.q_min for g in gens]), (p0.q_max, [g.q_max for g in gens]),
            (p0.load_p * p0.load_scale, [ld.p for ld in net.loads]),
            (p0.load_q * p0.load_scale, [ld.q for ld in net.loads]),
        ]
        worst0 = max([worst0] + [_rel_diff(a, b) for a, b in pairs])
        p1 = apply_homotopy(net, HomotopyParams(v=1.0))
        worst1 = max(worst1, np.abs(p1.p_min + kappa).max(), np.abs(p1.p_max - kappa).max(),
                     np.abs(p1.q_min + kappa).max(), np.abs(p1.q_max - kappa).max(),
                     np.abs(p1.tap_hat - 1.0).max(initial=0.0), np.abs(p1.shift_hat).max(initial=0.0))
    ok = worst0 <= 1e-15 and worst1 <= 1e-15 and kappa == 0.5
    verdict(capsys, 5, "homotopy identity at v=0 and v=1", ok,
            f"v=0 max rel. deviation {worst0:.1e} (<=1e-15); v=1 bounds/taps/shifts deviation {worst1:.1e}, "
            f"kappa {kappa}")


@pytest.mark.slow
def test_criterion_06_path_feasibility(capsys, tmp_path):
    problems = []
    runs = [(name, report_for(name)) for name in FEASIBLE] + [("case2infeasible (relaxed)", relaxed_infeasible())]
    for label, rep in runs:
        path = tmp_path / "trace.csv"
        write_trace(rep.trace, path)
        trace = read_trace(path)
        last = {}
        for rec in trace.records:
            if rec.step_accepted:
                last[rec.homotopy_step] = rec
        vs = [last[k].v for k in sorted(last)]
        worst = max(r.kkt_residual_inf_norm for r in last.values())
        decreasing = all(a > b for a, b in zip(vs, vs[1:]))
        # a sub-problem is accepted exactly when it converged
        subs = sum(s.converged for s in rep.subproblems) == len(vs) == len(rep.accepted_factors)
        if not (rep.converged and worst <= 1e-6 and decreasing and vs and vs[-1] == 0.0 and subs):
            problems.append(f"{label}: final KKT {worst:.1e}, v sequence {vs}")
    verdict(capsys, 6, "accepted steps converged and v strictly decreasing to 0", not problems,
            f"{len(runs)} runs audited from trace files" + ("; " + "; ".join(problems) if problems else ""))


def test_criterion_07_limiting_invariants(capsys):
    rng = np.random.default_rng(7)
    instances, bad = 0, 0
    for _ in range(2000):
        n = int(rng.integers(1, 30))
        lo = rng.uniform(-100, 100, n)
        hi = lo + 10.0 ** rng.uniform(-6, 3, n)
        x = lo + (hi - lo) * rng.uniform(1e-3, 1 - 1e-3, n)
        lo = np.where(rng.random(n) < 0.15, -np.inf, lo)
        hi = np.where(rng.random(n) < 0.15, np.inf, hi)
        dx = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 6, n)
        mu = 10.0 ** rng.uniform(-12, 4, n)
        dmu = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 6, n)
        alpha = float(rng.uniform(0.5, 0.9999))
        tx = primal_damping(x, dx, lo, hi, alpha)
        tm = dual_damping(mu, dmu, alpha)
        xn, mn = x + tx * dx, mu + tm * dmu
        ok = (np.all((tx > 0) & (tx <= 1)) and np.all((tm > 0) & (tm <= 1))
              and np.all(xn > lo) and np.all(xn < hi) and np.all(mn > 0))
        instances += 1
        bad += not ok
    # iterates produced by actual Newton steps
    net = bundled("case14")
    steps = 0
    for v in rng.uniform(0.0, 1.0, 10):
        pnet = apply_homotopy(net, HomotopyParams(v=float(v)), obj_scale=cost_scale(net))
        it = initial_iterate(pnet)
        for _ in range(8):
            eps = max(1e-7, 0.1 * float(np.mean(np.r_[it.mu_upper, it.mu_lower])))
            it, _ = newton_iteration(it, pnet, Perturbation.uniform(eps, len(pnet.layout.bounded)))
            steps += 1
            bad += not is_interior(it, pnet)
    verdict(capsys, 7, "damping factors in (0,1] and strict interiority", bad == 0 and instances >= 1000,
            f"{instances} randomized instances plus {steps} Newton updates, {bad} violations")


@pytest.mark.slow
def test_criterion_08_cross_formulation(capsys):
    problems, count = [], 0
    worst_mis, worst_flow = 0.0, -math.inf
    runs = [(name, report_for(name)) for name in FEASIBLE] + [("case2infeasible (relaxed)", relaxed_infeasible())]
    for label, rep in runs:
        if not rep.converged:
            continue
        count += 1
        ver = verify_report(rep, rep.network, raise_on_failure=False)
        worst_mis = max(worst_mis, ver.max_power_mismatch)
        worst_flow = max(worst_flow, ver.max_flow_violation)
        if not ver.passed:
            problems.append(f"{label}: {'; '.join(ver.violations[:3])}")
    verdict(capsys, 8, "converged solves pass verify_report", not problems and count == len(runs),
            f"{count} converged solves, worst mismatch {worst_mis:.1e} p.u. (<=1e-6), "
            f"worst flow excess {worst_flow:.1e} p.u. (<=1e-6)" + ("; " + "; ".join(problems) if problems else ""))


def test_criterion_09_congestion(capsys):
    rep = solved("case3congested")
    pnet = apply_homotopy(rep.network, HomotopyParams(), rep.layout)
    lay = rep.layout
    _, hi = pnet.bounds()
    gap = hi[lay.flow] - rep.iterate.x[lay.flow]
    pos = {int(j): k for k, j in enumerate(lay.bounded)}
    mult = np.array([rep.iterate.mu_upper[pos[int(j)]] for j in lay.flow])
    binding = (gap <= 1e-4) & (mult > 0)
    verdict(capsys, 9, "tight line limit binds with positive multiplier", rep.converged and binding.any(),
            f"case3congested: |F - I^2| = {gap.min():.1e} (<=1e-4), multiplier {mult.max():.4g} (>0)")


@pytest.mark.slow
def test_criterion_10_robustness_comparison(capsys, tmp_path):
    import json
    dest = tmp_path / "compare.json"
    code = cli.main(["compare", *FEASIBLE, "--out", str(dest)])
    rows = json.loads(dest.read_text())["rows"]
    imb_ok = [r["case"] for r in rows if r["imb"]["status"] == "converged"]
    pdip_nc = [r["case"] for r in rows if r["pdip"]["status"] != "converged"]
    ok = code == 0 and len(imb_ok) == len(FEASIBLE)
    verdict(capsys, 10, "compare: IMB converges on all bundled feasible cases", ok,
            f"IMB converged {len(imb_ok)}/{len(FEASIBLE)}; plain PDIP not converged on "
            f"{', '.join(pdip_nc) if pdip_nc else 'none'} (recorded, not asserted)")


def test_criterion_11_infeasible_mode(capsys, tmp_path):
    import json
    code_default = cli.main(["solve", "case2infeasible"])
    dest = tmp_path / "relaxed.json"
    code_relaxed = cli.main(["solve", "case2infeasible", "--allow-infeasible", "--out", str(dest)])
    doc = json.loads(dest.read_text())
    slack = doc["max_slack_injection"]
    ok = code_default == 2 and code_relaxed == 0 and doc["status"] == "converged" and slack > 0
    default = solve_acopf(bundled("case2infeasible"))
    ok = ok and default.status == "infeasible-path"
    verdict(capsys, 11, "demand above capacity", ok,
            f"default: {default.status} (exit {code_default}); --allow-infeasible: {doc['status']} "
            f"(exit {code_relaxed}) with slack injection {slack:.4g} p.u.")
