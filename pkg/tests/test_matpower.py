import io
import json

import numpy as np
import pytest

from imbopf import CaseFormatError, SolverOptions, parse_case, solve_acopf
from imbopf.matpower import (ConvergenceTrace, OutputError, TraceRecord, read_solution, read_trace,
                             solution_document, write_solution, write_trace)

from conftest import bundled, solved

TWO_BUS = """function mpc = tiny
% hand-written fixture
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	80	25	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	50	-50	1.0	100	1	150	0;
];
mpc.branch = [
	1	2	0.02	0.2	0.01	120	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	10	2;
];
"""


def test_hand_written_fixture_fields():
    raw = parse_case(TWO_BUS, name="tiny")
    assert raw.base_mva == 100
    assert raw.bus_table.shape[0] == 2 and raw.gen_table.shape[0] == 1 and raw.branch_table.shape[0] == 1
    np.testing.assert_array_equal(raw.bus_table[1, :4], [2, 1, 80, 25])
    np.testing.assert_array_equal(raw.gen_table[0, [0, 3, 4, 8]], [1, 50, -50, 150])
    np.testing.assert_array_equal(raw.branch_table[0, :6], [1, 2, 0.02, 0.2, 0.01, 120])
    np.testing.assert_array_equal(raw.gencost_table[0], [2, 0, 0, 3, 0.01, 10, 2])


def test_missing_gencost():
    text = TWO_BUS.split("mpc.gencost")[0]
    with pytest.raises(CaseFormatError) as err:
        parse_case(text)
    assert err.value.kind == "missing-table"


def test_piecewise_linear_cost_rejected():
    text = TWO_BUS.replace("2	0	0	3	0.01	10	2", "1	0	0	2	0	0	100	1000")
    with pytest.raises(CaseFormatError) as err:
        parse_case(text)
    assert err.value.kind == "unsupported-cost-model"


def test_syntax_error_reports_line():
    text = TWO_BUS.replace("80	25", "80	2x5")
    with pytest.raises(CaseFormatError) as err:
        parse_case(text)
    assert err.value.kind == "malformed-row"
    assert err.value.line == 7
    assert "line 7" in str(err.value)


def test_continuations_commas_and_comments():
    text = TWO_BUS.replace("1	0	0	50	-50	1.0	100	1	150	0;",
                           "1, 0, 0, 50, ... wrapped\n -50, 1.0, 100, 1, 150, 0; % trailing")
    raw = parse_case(text)
    np.testing.assert_array_equal(raw.gen_table[0, :5], [1, 0, 0, 50, -50])


def test_every_bundled_case_parses():
    for name in ("case5", "case9", "case14", "case30", "case57", "case118"):
        net = bundled(name)
        assert len(net.buses) == int(name[4:])


def test_solution_document_converged():
    rep = solved("case2bus")
    doc = solution_document(rep)
    assert doc["status"] == "converged"
    assert len(doc["buses"]) == 2
    assert doc["objective"] == rep.objective
    assert doc["accepted_factors"][-1] == 0.0


def test_solution_document_non_converged():
    rep = solve_acopf(bundled("case9"), opts=SolverOptions(max_newton=1), verify=False)
    assert not rep.converged
    doc = solution_document(rep)
    assert doc["status"] == "non-converged"
    assert len(doc["buses"]) == 9 and all(np.isfinite(b["vm"]) for b in doc["buses"])
    buf = io.StringIO()
    write_solution(rep, buf)
    json.loads(buf.getvalue())


def test_solution_round_trip(tmp_path):
    rep = solved("case3congested")
    path = tmp_path / "sol.json"
    write_solution(rep, path)
    doc = read_solution(path)
    assert doc["objective"] == pytest.approx(rep.objective)
    assert any(br["binding"] for br in doc["branches"])


def test_write_to_missing_directory():
    with pytest.raises(OutputError):
        write_solution(solved("case2bus"), "/nonexistent-dir/x/sol.json")


def test_empty_trace_header_only():
    buf = io.StringIO()
    write_trace(ConvergenceTrace(), buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 3 and lines[0].startswith("#") and lines[2].startswith("homotopy_step")


def test_three_record_trace_in_order():
    tr = ConvergenceTrace(params={"gamma": 10})
    for k in range(3):
        tr.append(TraceRecord(0, 1.0, k, 10.0 ** -k, 1.0, True, 0.5))
    buf = io.StringIO()
    write_trace(tr, buf)
    back = read_trace(io.StringIO(buf.getvalue()))
    assert [r.newton_iteration for r in back.records] == [0, 1, 2]
    assert back.params == {"gamma": 10}
    assert back.records == tr.records


def test_real_trace_v_non_increasing(tmp_path):
    path = tmp_path / "trace.csv"
    write_trace(solved("case2bus").trace, path)
    vs = read_trace(path).accepted_factors()
    assert vs[0] == 1.0 and vs[-1] == 0.0
    assert all(a >= b for a, b in zip(vs, vs[1:]))
