import dataclasses

import numpy as np
import pytest

from imbopf import ControllerSettings, HomotopyParams, solve_acopf, verify_report
from imbopf.formulation import apply_homotopy
from imbopf.homotopy import ControllerState, HomotopyAbort, VerificationFailed, next_factor, warm_start
from imbopf.kkt import is_interior

from conftest import bundled, solved


def test_accepted_step_advances_and_grows():
    cs = next_factor(ControllerState(None, 1.0, 0.1), "converged")
    assert cs.v_current == 1.0
    assert cs.v_trial == pytest.approx(0.9)
    assert cs.dv == pytest.approx(0.2)


def test_final_step_snaps_to_zero():
    cs = next_factor(ControllerState(0.2, 0.05, 0.2), "converged")
    assert cs.v_trial == 0.0


def test_failure_shrinks_toward_last_accepted():
    cs = next_factor(ControllerState(0.6, 0.2, 0.8), "diverged")
    assert cs.v_current == 0.6
    assert cs.v_trial == pytest.approx(0.4)
    assert cs.dv == pytest.approx(0.2)


def test_abort_below_minimum_step():
    cs = ControllerState(0.5, 0.5 - 1.5e-6, 3e-6, ControllerSettings(dv_min=1e-6, shrink=0.5))
    with pytest.raises(HomotopyAbort):
        next_factor(cs, "iteration-limit")


def test_first_subproblem_failure_aborts():
    with pytest.raises(HomotopyAbort):
        next_factor(ControllerState(None, 1.0, 0.1), "diverged")


def test_dv_capped():
    cs = ControllerState(None, 1.0, 0.4, ControllerSettings(dv_init=0.4, dv_max=0.5))
    cs = next_factor(cs, "converged")
    assert cs.dv == 0.5


def test_warm_start_is_interior_after_bounds_move():
    net = bundled("case9")
    p1 = apply_homotopy(net, HomotopyParams(v=1.0))
    p0 = apply_homotopy(net, HomotopyParams(v=0.5))
    rep = solved("case9")
    it = rep.subproblems[0].iterate
    assert is_interior(warm_start(it, p0), p0)
    assert is_interior(warm_start(it, p1), p1)


def test_two_bus_converges_and_verifies():
    rep = solved("case2bus")
    assert rep.converged
    assert rep.verification.passed
    assert rep.verification.max_power_mismatch <= 1e-6
    assert rep.accepted_factors[0] == 1.0 and rep.accepted_factors[-1] == 0.0


def test_perturbed_voltage_fails_kcl():
    rep = solved("case2bus")
    bad = dataclasses.replace(rep, iterate=rep.iterate.copy())
    bad.iterate.x[rep.layout.vr[1]] += 1e-2
    verdict = verify_report(bad, rep.network, raise_on_failure=False)
    assert not verdict.passed
    assert any(v.startswith("kcl") for v in verdict.violations)
    with pytest.raises(VerificationFailed):
        verify_report(bad, rep.network)


def test_generator_above_limit_fails_bounds():
    rep = solved("case2bus")
    bad = dataclasses.replace(rep, iterate=rep.iterate.copy())
    j = rep.layout.pg[0]
    bad.iterate.x[j] = rep.network.generators[0].p_max + 1e-3
    verdict = verify_report(bad, rep.network, raise_on_failure=False)
    assert any(v.startswith("bounds") for v in verdict.violations)


def test_infeasible_case_default_mode():
    rep = solve_acopf(bundled("case2infeasible"))
    assert rep.status == "infeasible-path"
    assert rep.slack_injection > 1e-4


def test_infeasible_case_relaxed_mode():
    rep = solve_acopf(bundled("case2infeasible"), HomotopyParams(relaxation=1e-2))
    assert rep.converged
    assert rep.slack_injection > 1e-3
    assert rep.verification.passed and rep.verification.relaxation == pytest.approx(1e-2)
    # the generator runs flat out and the remainder is carried by the slack source
    pg, _ = rep.dispatch()
    assert pg[0] == pytest.approx(rep.network.generators[0].p_max, abs=1e-4)


def test_plain_pdip_on_small_case():
    rep = solve_acopf(bundled("case9"), homotopy_enabled=False)
    assert rep.converged
    assert rep.accepted_factors == [0.0]
    assert rep.objective == pytest.approx(solved("case9").objective, rel=1e-6)


def test_trace_parameters_echo_gamma():
    rep = solved("case5")
    assert rep.trace.params["gamma"] == HomotopyParams().gamma
    assert rep.options_echo["merit_norm"] == "inf"


def test_congested_case_binds():
    rep = solved("case3congested")
    lim = [f for f in rep.branch_flows() if "flow_squared" in f]
    assert any(f["binding"] and f["multiplier"] > 0 for f in lim)
