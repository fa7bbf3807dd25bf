"""MATPOWER case parsing and solution / trace serialization."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RawCase",
    "CaseFormatError",
    "TraceRecord",
    "ConvergenceTrace",
    "parse_case",
    "load_case",
    "write_solution",
    "read_solution",
    "write_trace",
    "read_trace",
    "OutputError",
    "solution_document",
    "SOLUTION_SCHEMA",
    "TRACE_SCHEMA",
]

SOLUTION_SCHEMA = "imbopf-solution/1"
TRACE_SCHEMA = "imbopf-trace/1"

# minimum column counts per table
MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 5}


class CaseFormatError(ValueError):
    """Malformed case file.

    ``kind`` is ``missing-table``, ``malformed-row`` or
    ``unsupported-cost-model``; ``line`` is 1-based when known.
    """

    def __init__(self, kind: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{kind}: {where}{message}")
        self.kind = kind
        self.line = line


@dataclass
class RawCase:
    base_mva: float
    bus_table: np.ndarray
    gen_table: np.ndarray
    branch_table: np.ndarray
    gencost_table: np.ndarray
    name: str = ""

    def __eq__(self, other):
        if not isinstance(other, RawCase):
            return NotImplemented
        return self.base_mva == other.base_mva and all(
            np.array_equal(getattr(self, t), getattr(other, t))
            for t in ("bus_table", "gen_table", "branch_table", "gencost_table")
        )


_ASSIGN = re.compile(r"mpc\s*\.\s*(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:Inf|inf|NaN|nan)")


def _strip_comments(text: str) -> list[str]:
    lines = []
    for raw in text.splitlines():
        cut = len(raw)
        in_str = False
        for i, ch in enumerate(raw):
            if ch == "'":
                in_str = not in_str
            elif ch in "%#" and not in_str:
                cut = i
                break
            elif raw.startswith("...", i) and not in_str:
                # the rest of a continued line is a comment
                cut = i + 3
                break
        lines.append(raw[:cut])
    return lines


def _parse_matrix(lines: list[str], start_line: int, start_col: int, name: str):
    """Parse ``[ ... ]`` beginning at ``lines[start_line][start_col]``.

    Returns (rows with their line numbers, index of the line holding ``]``).
    """
    rows: list[tuple[int, list[float]]] = []
    current: list[float] = []
    current_line = start_line + 1
    i, col = start_line, start_col + 1
    while i < len(lines):
        segment = lines[i][col:]
        end = segment.find("]")
        body = segment if end < 0 else segment[:end]
        body = body.replace("...", " ")
        for piece_no, piece in enumerate(body.split(";")):
            if piece_no > 0 and current:
                rows.append((current_line, current))
                current = []
            for tok in re.split(r"[\s,]+", piece.strip()):
                if not tok:
                    continue
                if not _NUMBER.fullmatch(tok):
                    raise CaseFormatError("malformed-row", f"non-numeric entry {tok!r} in mpc.{name}", i + 1)
                if not current:
                    current_line = i + 1
                current.append(float(tok))
        if end >= 0:
            if current:
                rows.append((current_line, current))
            return rows, i
        # newline ends a row unless continued with '...'
        if current and not lines[i][col:].rstrip().endswith("..."):
            rows.append((current_line, current))
            current = []
        i, col = i + 1, 0
    raise CaseFormatError("malformed-row", f"unterminated matrix mpc.{name}", start_line + 1)


def _skip_block(lines, i, col, opener, closer):
    depth = 0
    while i < len(lines):
        for j in range(col, len(lines[i])):
            ch = lines[i][j]
            if ch == opener:
                depth += 1
            elif ch == closer:
                depth -= 1
                if depth == 0:
                    return i
        i, col = i + 1, 0
    return i


def parse_case(text: str, name: str = "") -> RawCase:
    """Parse MATPOWER case text into a :class:`RawCase`."""
    lines = _strip_comments(text)
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    base_mva = None
    i = 0
    while i < len(lines):
        m = _ASSIGN.search(lines[i])
        if not m:
            i += 1
            continue
        field_name, col = m.group(1), m.end()
        rest = lines[i][col:].lstrip()
        col = len(lines[i]) - len(rest)
        if rest.startswith("["):
            rows, i = _parse_matrix(lines, i, col, field_name)
            if field_name in MIN_COLUMNS:
                tables[field_name] = rows
        elif rest.startswith("{"):
            i = _skip_block(lines, i, col, "{", "}")
        elif field_name == "baseMVA":
            tok = rest.split(";")[0].strip()
            try:
                base_mva = float(tok)
            except ValueError:
                raise CaseFormatError("malformed-row", f"baseMVA value {tok!r} is not numeric", i + 1) from None
        i += 1

    if base_mva is None:
        raise CaseFormatError("missing-table", "mpc.baseMVA not found")
    arrays = {}
    for tname, min_cols in MIN_COLUMNS.items():
        if tname not in tables:
            raise CaseFormatError("missing-table", f"mpc.{tname} not found")
        rows = tables[tname]
        if not rows:
            arrays[tname] = np.zeros((0, min_cols))
            continue
        width = len(rows[0][1])
        for line_no, row in rows:
            if len(row) < min_cols:
                raise CaseFormatError(
                    "malformed-row", f"mpc.{tname} row has {len(row)} columns, needs {min_cols}", line_no)
            if tname != "gencost" and len(row) != width:
                raise CaseFormatError("malformed-row", f"mpc.{tname} rows have inconsistent widths", line_no)
        if tname == "gencost":
            width = max(len(r) for _, r in rows)
            for line_no, row in rows:
                _check_cost_row(row, line_no)
            arrays[tname] = np.array([r + [0.0] * (width - len(r)) for _, r in rows])
        else:
            arrays[tname] = np.array([r for _, r in rows])
    if len(arrays["gencost"]) < len(arrays["gen"]):
        raise CaseFormatError("missing-table", "mpc.gencost has fewer rows than mpc.gen")
    return RawCase(base_mva, arrays["bus"], arrays["gen"], arrays["branch"], arrays["gencost"], name=name)


def _check_cost_row(row, line_no):
    model = int(row[0])
    if model != 2:
        raise CaseFormatError("unsupported-cost-model", f"gencost model {model} (only polynomial 2)", line_no)
    n = int(row[3])
    if len(row) < 4 + n:
        raise CaseFormatError("malformed-row", f"gencost row declares {n} coefficients", line_no)
    leading = row[4:4 + max(0, n - 3)]
    if any(c != 0 for c in leading):
        raise CaseFormatError("unsupported-cost-model", f"polynomial of degree {n - 1} > 2", line_no)


def load_case(path: str | os.PathLike) -> RawCase:
    path = Path(path)
    return parse_case(path.read_text(encoding="utf-8", errors="replace"), name=path.stem)


# ---------------------------------------------------------------------------
# convergence trace

TRACE_FIELDS = ("homotopy_step", "v", "newton_iteration", "kkt_residual_inf_norm", "objective",
                "step_accepted", "damping_min", "regularization", "slack_injection_norm")


@dataclass
class TraceRecord:
    homotopy_step: int
    v: float
    newton_iteration: int
    kkt_residual_inf_norm: float
    objective: float
    step_accepted: bool
    damping_min: float
    regularization: float = 0.0
    slack_injection_norm: float = 0.0


@dataclass
class ConvergenceTrace:
    records: list[TraceRecord] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def accepted_factors(self) -> list[float]:
        """Homotopy factors of accepted steps, in run order."""
        out, last_step = [], None
        for rec in self.records:
            if rec.step_accepted and rec.homotopy_step != last_step:
                out.append(rec.v)
                last_step = rec.homotopy_step
        return out


class OutputError(OSError):
    """A solution or trace could not be written (``kind`` is ``io-failure``)."""

    kind = "io-failure"


def _open_dest(destination, mode="w"):
    if hasattr(destination, "write"):
        return destination, False
    try:
        return open(destination, mode, encoding="utf-8", newline=""), True
    except OSError as exc:
        raise OutputError(f"io-failure: cannot open {destination}: {exc.strerror or exc}") from exc


def write_trace(trace: ConvergenceTrace, destination) -> None:
    """Write one CSV row per Newton iteration, after two ``#`` header lines."""
    fh, owned = _open_dest(destination)
    try:
        fh.write(f"# schema: {TRACE_SCHEMA}\n")
        fh.write(f"# params: {json.dumps(trace.params, sort_keys=True)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for rec in trace.records:
            writer.writerow([
                rec.homotopy_step, repr(float(rec.v)), rec.newton_iteration,
                repr(float(rec.kkt_residual_inf_norm)), repr(float(rec.objective)),
                int(rec.step_accepted), repr(float(rec.damping_min)),
                repr(float(rec.regularization)), repr(float(rec.slack_injection_norm)),
            ])
    finally:
        if owned:
            fh.close()


def read_trace(source) -> ConvergenceTrace:
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    params = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# params:"):
            params = json.loads(line[len("# params:"):])
        elif not line.startswith("#"):
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    trace = ConvergenceTrace(params=params)
    for row in reader:
        trace.append(TraceRecord(
            homotopy_step=int(row["homotopy_step"]), v=float(row["v"]),
            newton_iteration=int(row["newton_iteration"]),
            kkt_residual_inf_norm=float(row["kkt_residual_inf_norm"]),
            objective=float(row["objective"]), step_accepted=row["step_accepted"] == "1",
            damping_min=float(row["damping_min"]), regularization=float(row["regularization"]),
            slack_injection_norm=float(row["slack_injection_norm"]),
        ))
    return trace


# ---------------------------------------------------------------------------
# solution document

def _clean(value):
    """Recursively turn numpy scalars into Python ones and non-finite floats into strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def solution_document(report) -> dict:
    """Build the JSON-ready solution dictionary for a :class:`SolveReport`."""
    from .formulation import bus_voltages, generator_dispatch

    net = report.network
    layout = report.layout
    x = report.iterate.x
    vr, vi = bus_voltages(layout, x)
    pg, qg = generator_dispatch(layout, x)
    flows = report.branch_flows()
    buses = []
    for k, bus in enumerate(net.buses):
        vm = math.hypot(vr[k], vi[k])
        buses.append({
            "index": bus.index, "vm": vm, "va_deg": math.degrees(math.atan2(vi[k], vr[k])),
            "vr": float(vr[k]), "vi": float(vi[k]),
            "slack_ir": float(x[layout.slack_r[k]]), "slack_ii": float(x[layout.slack_i[k]]),
        })
    gens = [{"bus": g.bus, "p": float(pg[k]), "q": float(qg[k]),
             "p_mw": float(pg[k] * net.base_mva), "q_mvar": float(qg[k] * net.base_mva)}
            for k, g in enumerate(net.generators)]
    branches = []
    for k, br in enumerate(net.branches):
        f = flows[k]
        branches.append({
            "from_bus": br.from_bus, "to_bus": br.to_bus,
            "p_from": f["p_from"], "q_from": f["q_from"], "p_to": f["p_to"], "q_to": f["q_to"],
            "series_current": f["series_current"],
            "limit_kind": "current" if br.current_limit is not None else
                          ("power" if br.power_limit is not None else None),
            "limit": br.current_limit if br.current_limit is not None else br.power_limit,
            "binding": f["binding"], "multiplier": f["multiplier"],
        })
    doc = {
        "schema": SOLUTION_SCHEMA,
        "case": net.name,
        "base_mva": net.base_mva,
        "status": "converged" if report.converged else "non-converged",
        "termination": report.status,
        "message": report.message,
        "objective": report.objective,
        "penalized_objective": report.penalized_objective,
        "homotopy_steps": report.homotopy_steps,
        "total_newton": report.total_newton,
        "final_v": report.final_v,
        "accepted_factors": list(report.accepted_factors),
        "max_slack_injection": report.slack_injection,
        "options": report.options_echo,
        "buses": buses,
        "generators": gens,
        "branches": branches,
    }
    if report.verification is not None:
        doc["verification"] = report.verification.as_dict()
    return _clean(doc)


def write_solution(report, destination) -> None:
    """Serialize a terminated solve to a JSON document (see README for schema)."""
    doc = solution_document(report)
    fh, owned = _open_dest(destination)
    try:
        json.dump(doc, fh, indent=1, allow_nan=False)
        fh.write("\n")
    finally:
        if owned:
            fh.close()


def read_solution(source) -> dict:
    if hasattr(source, "read"):
        return json.load(source)
    with open(source, encoding="utf-8") as fh:
        return json.load(fh)
