import dataclasses
import json

import pytest

from imbopf import cli
from imbopf.matpower import read_trace

from conftest import DATA


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_solve_writes_outputs(tmp_path, capsys):
    sol, tr = tmp_path / "s.json", tmp_path / "t.csv"
    code, out, _ = run(capsys, "solve", "case2bus", "--out", str(sol), "--trace", str(tr))
    assert code == 0
    assert "status: converged" in out
    doc = json.loads(sol.read_text())
    assert doc["status"] == "converged" and doc["verification"]["passed"]
    assert read_trace(tr).accepted_factors()[-1] == 0.0


def test_solve_accepts_file_path(capsys):
    code, _, _ = run(capsys, "solve", str(DATA / "case3congested.m"))
    assert code == 0


def test_syntax_error_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    text = (DATA / "case2bus.m").read_text().replace("100	30", "100	3o")
    bad.write_text(text)
    code, _, err = run(capsys, "solve", str(bad))
    assert code == 1
    assert "malformed-row" in err and "line 11" in err


def test_invalid_network_exit_one(tmp_path, capsys):
    bad = tmp_path / "noref.m"
    bad.write_text((DATA / "case2bus.m").read_text().replace("	1	3	0	0", "	1	2	0	0"))
    code, _, err = run(capsys, "solve", str(bad))
    assert code == 1 and "no-reference-bus" in err


def test_missing_case_exit_four(capsys):
    code, _, err = run(capsys, "solve", "no_such_case_anywhere")
    assert code == 4 and "not found" in err


def test_unwritable_output_exit_four(capsys):
    code, _, _ = run(capsys, "solve", "case2bus", "--out", "/nonexistent-dir/sol.json")
    assert code == 4


def test_infeasible_exit_two_then_relaxed(capsys):
    code, out, _ = run(capsys, "solve", "case2infeasible")
    assert code == 2 and "infeasible-path" in out and "--allow-infeasible" in out
    code, out, _ = run(capsys, "solve", "case2infeasible", "--allow-infeasible")
    assert code == 0 and "status: converged" in out


def test_no_homotopy_flag(capsys):
    code, out, _ = run(capsys, "solve", "case9", "--no-homotopy")
    assert code == 0 and "homotopy steps: 1" in out


def test_verification_failure_exit_three(monkeypatch, capsys):
    real = cli.solve_acopf

    def tampered(*args, **kwargs):
        rep = real(*args, **kwargs)
        rep.verification = dataclasses.replace(rep.verification, passed=False, violations=["forced"])
        return rep

    monkeypatch.setattr(cli, "solve_acopf", tampered)
    code, _, _ = run(capsys, "solve", "case2bus")
    assert code == 3


def test_check_command(capsys):
    code, out, _ = run(capsys, "check", "case9", "--iterates", "3")
    assert code == 0
    assert "gradient" in out and "power mismatch at solution" in out


def test_check_rejects_bad_step(capsys):
    with pytest.raises(SystemExit):
        cli.main(["check", "case9", "--step", "1"])


def test_compare_reports_both_modes(tmp_path, capsys):
    dest = tmp_path / "cmp.json"
    code, out, _ = run(capsys, "compare", "case2bus", "case9", "--out", str(dest))
    assert code == 0
    rows = json.loads(dest.read_text())["rows"]
    assert [r["case"] for r in rows] == ["case2bus", "case9"]
    assert all(r["imb"]["status"] == "converged" for r in rows)
    assert all(r["pdip"]["status"] in ("converged", "NC") for r in rows)
    assert "NC: not converged" in out


def test_flags_reach_the_solver():
    ns = cli.build_parser().parse_args(["solve", "case9", "--gamma", "50", "--kappa", "0.3", "--tol", "1e-7",
                                        "--max-newton", "40", "--dv-init", "0.05"])
    cfg = cli.config_from_args(ns)
    h, opts, ctl = cli._params(cfg)
    assert (h.gamma, h.kappa) == (50.0, 0.3)
    assert opts.tol_primal == opts.tol_dual == opts.tol_comp == 1e-7 and opts.max_newton == 40
    assert ctl.dv_init == 0.05
    assert h.relaxation is None


def test_positive_flags_validated():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["solve", "case9", "--gamma", "-1"])
