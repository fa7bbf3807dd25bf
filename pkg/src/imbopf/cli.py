"""Command-line entry point: ``imbopf solve | check | compare``.

Exit status: 0 success, 1 parse or validation failure, 2 non-convergence,
3 verification failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formulation import HomotopyParams, apply_homotopy
from .grid import NetworkError, to_per_unit, validate_network
from .homotopy import ControllerSettings, solve_acopf
from .matpower import CaseFormatError, OutputError, load_case, write_solution, write_trace
from .oracle import finite_diff_check, power_mismatch, random_interior_iterate
from .pdip import SolverOptions

EXIT_OK, EXIT_PARSE, EXIT_NONCONVERGED, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3, 4

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_RELAXATION = 1e-2

log = logging.getLogger("imbopf")


@dataclass
class RunConfig:
    command: str
    cases: list[str]
    homotopy: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    use_homotopy: bool = True
    allow_infeasible: bool = False
    relaxation: float = DEFAULT_RELAXATION
    flow_limits: str = "mixed"
    out: str | None = None
    trace: str | None = None
    step: float = 1e-6
    iterates: int = 5
    seed: int = 0
    solve_check: bool = True


class _IOFailure(Exception):
    pass


def resolve_case(name: str) -> Path:
    """A path to an existing file, or the name of a bundled case."""
    p = Path(name)
    if p.is_file():
        return p
    for cand in (DATA_DIR / name, DATA_DIR / f"{name}.m"):
        if cand.is_file():
            return cand
    raise _IOFailure(f"case file not found: {name}")


def _load(name: str, flow_limits: str):
    path = resolve_case(name)
    try:
        raw = load_case(path)
    except OSError as exc:
        raise _IOFailure(f"cannot read {path}: {exc}") from exc
    net = to_per_unit(raw, flow_limits=flow_limits, name=path.stem)
    return validate_network(net)


def _params(cfg: RunConfig) -> tuple[HomotopyParams, SolverOptions, ControllerSettings]:
    h = HomotopyParams(**cfg.homotopy, relaxation=cfg.relaxation if cfg.allow_infeasible else None)
    return h, SolverOptions(**cfg.solver), ControllerSettings(**cfg.controller)


def _summary(report) -> str:
    lines = [f"status: {report.status}",
             f"objective: {report.objective:.6f}",
             f"homotopy steps: {report.homotopy_steps}  newton iterations: {report.total_newton}",
             f"wall time: {report.wall_time:.2f} s",
             f"max slack injection: {report.slack_injection:.3e} p.u."]
    if report.message:
        lines.append(f"message: {report.message}")
    if report.verification is not None:
        ver = report.verification
        lines.append(f"verification: {'passed' if ver.passed else 'FAILED'}"
                     f" (mismatch {ver.max_power_mismatch:.2e}, flow excess {ver.max_flow_violation:.2e})")
        lines.extend(f"  {v}" for v in ver.violations[:20])
    return "\n".join(lines)


def _cmd_solve(cfg: RunConfig) -> int:
    net = _load(cfg.cases[0], cfg.flow_limits)
    h, opts, ctl = _params(cfg)
    report = solve_acopf(net, h, opts, homotopy_enabled=cfg.use_homotopy, controller=ctl)
    try:
        if cfg.out:
            write_solution(report, cfg.out)
        if cfg.trace:
            write_trace(report.trace, cfg.trace)
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    print(_summary(report))
    if not report.converged:
        if report.status == "infeasible-path":
            print("hint: rerun with --allow-infeasible to obtain the relaxed solution")
        return EXIT_NONCONVERGED
    if report.verification is not None and not report.verification.passed:
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_check(cfg: RunConfig) -> int:
    net = _load(cfg.cases[0], cfg.flow_limits)
    h, opts, ctl = _params(cfg)
    rng = np.random.default_rng(cfg.seed)
    worst = {"gradient": 0.0, "jacobian": 0.0, "hessian_vector": 0.0}
    for k in range(cfg.iterates):
        pnet = apply_homotopy(net, h.at(k / max(cfg.iterates - 1, 1)))
        rep = finite_diff_check(random_interior_iterate(pnet, rng), pnet, cfg.step, full_hessian=False)
        for name in worst:
            worst[name] = max(worst[name], getattr(rep, name))
    print(f"finite differences (step {cfg.step:g}, {cfg.iterates} iterates):")
    for name, val in worst.items():
        print(f"  {name:15s} {val:.3e}")
    ok = worst["gradient"] <= 1e-5 and worst["jacobian"] <= 1e-5 and worst["hessian_vector"] <= 1e-4
    if cfg.solve_check:
        report = solve_acopf(net, h, opts, homotopy_enabled=cfg.use_homotopy, controller=ctl, verify=False)
        if not report.converged:
            print(f"solve: {report.status}; power mismatch not evaluated")
            return EXIT_NONCONVERGED
        dp, dq = power_mismatch(report.iterate, net)
        mis = float(max(np.abs(dp).max(initial=0.0), np.abs(dq).max(initial=0.0)))
        print(f"power mismatch at solution: {mis:.3e} p.u.")
        ok = ok and (mis <= 1e-6 or cfg.allow_infeasible)
    return EXIT_OK if ok else EXIT_VERIFY


def _cmd_compare(cfg: RunConfig) -> int:
    h, opts, ctl = _params(cfg)
    rows = []
    all_imb = True
    for name in cfg.cases:
        net = _load(name, cfg.flow_limits)
        row = {"case": net.name, "buses": len(net.buses)}
        for label, homotopy in (("imb", True), ("pdip", False)):
            rep = solve_acopf(net, h, opts, homotopy_enabled=homotopy, controller=ctl)
            ok = rep.converged and (rep.verification is None or rep.verification.passed)
            row[label] = {"status": "converged" if ok else "NC", "detail": rep.status,
                          "iterations": rep.total_newton, "time_s": round(rep.wall_time, 3),
                          "objective": rep.objective if ok else None}
            if homotopy and not ok:
                all_imb = False
        rows.append(row)
    header = f"{'case':20s} {'buses':>6s} | {'IMB':>9s} {'iter':>5s} {'time/s':>8s} {'objective':>14s}" \
             f" | {'PDIP':>9s} {'iter':>5s} {'time/s':>8s} {'objective':>14s}"
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = []
        for label in ("imb", "pdip"):
            r = row[label]
            obj = f"{r['objective']:14.4f}" if r["objective"] is not None else f"{'-':>14s}"
            cells.append(f"{r['status']:>9s} {r['iterations']:5d} {r['time_s']:8.2f} {obj}")
        lines.append(f"{row['case']:20s} {row['buses']:6d} | " + " | ".join(cells))
    lines.append("NC: not converged")
    text = "\n".join(lines)
    print(text)
    if cfg.out:
        try:
            with open(cfg.out, "w", encoding="utf-8") as fh:
                json.dump({"rows": rows, "table": text}, fh, indent=1)
        except OSError as exc:
            raise _IOFailure(str(exc)) from exc
    return EXIT_OK if all_imb else EXIT_NONCONVERGED


def run(cfg: RunConfig) -> int:
    """Execute a parsed configuration and map the outcome to an exit status."""
    handler = {"solve": _cmd_solve, "check": _cmd_check, "compare": _cmd_compare}[cfg.command]
    try:
        return handler(cfg)
    except CaseFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NetworkError as exc:
        print(f"error: invalid network: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (_IOFailure, OutputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def _positive(kind):
    def conv(text):
        val = kind(text)
        if val <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return conv


def build_parser() -> argparse.ArgumentParser:
    d_h, d_o, d_c = HomotopyParams(), SolverOptions(), ControllerSettings()
    parser = argparse.ArgumentParser(prog="imbopf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--gamma", type=_positive(float), default=d_h.gamma,
                        help="series admittance scaling at v = 1 (default %(default)g)")
    common.add_argument("--kappa", type=_positive(float), default=d_h.kappa,
                        help="generator bound magnitude at v = 1 (default %(default)g)")
    common.add_argument("--tol", type=_positive(float), default=d_o.tol_primal,
                        help="KKT tolerance for all residual blocks (default %(default)g)")
    common.add_argument("--max-newton", type=_positive(int), default=d_o.max_newton,
                        help="Newton iterations per sub-problem (default %(default)d)")
    common.add_argument("--dv-init", type=_positive(float), default=d_c.dv_init,
                        help="first homotopy decrement (default %(default)g)")
    common.add_argument("--no-homotopy", action="store_true", help="solve the original problem directly")
    common.add_argument("--allow-infeasible", action="store_true",
                        help="keep slack injections at v = 0 to obtain a relaxed solution")
    common.add_argument("--relaxation", type=_positive(float), default=DEFAULT_RELAXATION,
                        help="slack coefficient kept at v = 0 with --allow-infeasible (default %(default)g)")
    common.add_argument("--flow-limits", choices=("mixed", "current", "power"), default="mixed",
                        help="how rateA is read (default %(default)s)")

    p = sub.add_parser("solve", parents=[common], help="solve one case and verify the result")
    p.add_argument("case", help="MATPOWER case file or bundled case name")
    p.add_argument("--out", help="write the solution document here")
    p.add_argument("--trace", help="write the per-iteration trace here")

    p = sub.add_parser("check", parents=[common], help="derivative and power-mismatch checks")
    p.add_argument("case")
    p.add_argument("--step", type=float, default=1e-6, help="relative finite-difference step")
    p.add_argument("--iterates", type=_positive(int), default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-solve", action="store_true", help="skip the solve and mismatch check")

    p = sub.add_parser("compare", parents=[common], help="IMB homotopy against plain PDIP")
    p.add_argument("cases", nargs="+")
    p.add_argument("--out", help="write the comparison as JSON here")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    cases = ns.cases if ns.command == "compare" else [ns.case]
    if ns.command == "check" and not 1e-8 <= ns.step <= 1e-4:
        raise SystemExit("error: --step must lie in [1e-8, 1e-4]")
    return RunConfig(
        command=ns.command, cases=cases,
        homotopy={"gamma": ns.gamma, "kappa": ns.kappa},
        solver={"tol_primal": ns.tol, "tol_dual": ns.tol, "tol_comp": ns.tol, "max_newton": ns.max_newton},
        controller={"dv_init": ns.dv_init, "dv_max": max(ns.dv_init, ControllerSettings().dv_max)},
        use_homotopy=not ns.no_homotopy, allow_infeasible=ns.allow_infeasible,
        relaxation=ns.relaxation, flow_limits=ns.flow_limits,
        out=getattr(ns, "out", None), trace=getattr(ns, "trace", None),
        step=getattr(ns, "step", 1e-6), iterates=getattr(ns, "iterates", 5),
        seed=getattr(ns, "seed", 0), solve_check=not getattr(ns, "no_solve", False),
    )


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    code = run(config_from_args(ns))
    log.info("finished in %.2f s with exit status %d", time.perf_counter() - t0, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
