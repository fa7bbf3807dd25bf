"""Independent checks: finite-difference derivatives, brute-force optima on
tiny networks and a power-mismatch evaluation of a solved point."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .formulation import (
    DegenerateVoltageError,
    Iterate,
    ParameterizedNetwork,
    VariableLayout,
    equality_jacobian,
    equality_residuals,
    lagrangian_hessian,
    objective_terms,
    objective_value_gradient,
)
from .grid import Network
from .kkt import check_interior

__all__ = [
    "DerivativeCheckReport",
    "OracleResult",
    "OracleError",
    "finite_diff_check",
    "brute_force_optimum",
    "power_mismatch",
    "network_admittance",
    "random_interior_iterate",
]


LINEAR_STEP = 1e-2


class OracleError(ValueError):
    def __init__(self, kind: str, msg: str):
        super().__init__(f"{kind}: {msg}")
        self.kind = kind


# ---------------------------------------------------------------- derivatives

@dataclass
class DerivativeCheckReport:
    gradient: float
    jacobian: float
    hessian: float | None
    hessian_vector: float
    step: float
    worst: dict = field(default_factory=dict)
    # Jacobian error over the rows that are linear in x (ammeter and reference rows)
    linear_rows: float = 0.0

    @property
    def max_error(self) -> float:
        vals = [self.gradient, self.jacobian, self.hessian_vector]
        if self.hessian is not None:
            vals.append(self.hessian)
        return max(vals)


def _rel(a: np.ndarray, f: np.ndarray) -> tuple[float, int]:
    err = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1.0)
    if err.size == 0:
        return 0.0, -1
    k = int(np.argmax(err))
    return float(err.flat[k]), k


def finite_diff_check(it: Iterate, pnet: ParameterizedNetwork, step: float = 1e-6,
                      full_hessian: bool | None = None, hvp_directions: int = 4,
                      seed: int = 0) -> DerivativeCheckReport:
    """Compare analytic derivatives with central differences at ``it``.

    Relative errors are ``|a - f| / max(|a|, |f|, 1)`` entrywise; the
    perturbation for variable i is ``step * max(1, |x_i|)``.
    """
    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-8, 1e-4], got {step}")
    check_interior(it, pnet)
    x0 = it.x
    n = len(x0)
    lam = it.lam
    hs = step * np.maximum(1.0, np.abs(x0))

    def lag_grad(x):
        _, g = objective_value_gradient(x, pnet)
        return g + equality_jacobian(x, pnet).T @ lam

    f0, grad = objective_value_gradient(x0, pnet)
    terms0 = objective_terms(x0, pnet)
    if not math.isclose(math.fsum(terms0), f0, rel_tol=1e-12, abs_tol=1e-12):
        raise AssertionError("objective terms do not sum to the objective value")
    jac = equality_jacobian(x0, pnet).toarray()
    hess = lagrangian_hessian(it, pnet)
    if full_hessian is None:
        full_hessian = n <= 600

    g_fd = np.empty(n)
    j_fd = np.empty_like(jac)
    h_fd = np.empty((n, n)) if full_hessian else None
    for i in range(n):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += hs[i]
        xm[i] -= hs[i]
        # differencing term by term keeps untouched terms from adding roundoff
        g_fd[i] = math.fsum(objective_terms(xp, pnet) - objective_terms(xm, pnet)) / (2 * hs[i])
        j_fd[:, i] = (equality_residuals(xp, pnet) - equality_residuals(xm, pnet)) / (2 * hs[i])
        if full_hessian:
            h_fd[:, i] = (lag_grad(xp) - lag_grad(xm)) / (2 * hs[i])

    worst = {}
    eg, kg = _rel(grad, g_fd)
    worst["gradient"] = kg
    ej, kj = _rel(jac, j_fd)
    worst["jacobian"] = np.unravel_index(kj, jac.shape) if kj >= 0 else None
    # rows linear in x: a central difference is exact for any step, so a
    # wide one leaves only rounding and any hidden curvature would show up
    lay = pnet.layout
    lin = np.r_[lay.kvl_r, lay.kvl_i, lay.ref_row]
    wide = LINEAR_STEP * np.maximum(1.0, np.abs(x0))
    l_fd = np.empty((len(lin), n))
    for i in range(n):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += wide[i]
        xm[i] -= wide[i]
        l_fd[:, i] = (equality_residuals(xp, pnet)[lin] - equality_residuals(xm, pnet)[lin]) / (2 * wide[i])
    el, _ = _rel(jac[lin], l_fd)
    eh = None
    if full_hessian:
        eh, kh = _rel(hess.toarray(), h_fd)
        worst["hessian"] = np.unravel_index(kh, (n, n)) if kh >= 0 else None

    rng = np.random.default_rng(seed)
    ehv = 0.0
    for _ in range(hvp_directions):
        d = rng.standard_normal(n)
        d /= np.abs(d).max()
        t = step * max(1.0, float(np.abs(x0).max()))
        fd = (lag_grad(x0 + t * d) - lag_grad(x0 - t * d)) / (2 * t)
        ehv = max(ehv, _rel(hess @ d, fd)[0])
    return DerivativeCheckReport(eg, ej, eh, ehv, step, worst, el)


def random_interior_iterate(pnet: ParameterizedNetwork, rng: np.random.Generator) -> Iterate:
    """A strictly interior iterate with random voltages, currents and multipliers."""
    lay = pnet.layout
    lo, hi = pnet.bounds()
    x = np.zeros(lay.n)
    vm = rng.uniform(0.9, 1.1, lay.n_bus)
    va = rng.uniform(-0.3, 0.3, lay.n_bus)
    x[lay.vr], x[lay.vi] = vm * np.cos(va), vm * np.sin(va)
    x[lay.slack_r] = rng.normal(0.0, 0.1, lay.n_bus)
    x[lay.slack_i] = rng.normal(0.0, 0.1, lay.n_bus)
    x[lay.ir] = rng.normal(0.0, 0.5, lay.n_limited)
    x[lay.ii] = rng.normal(0.0, 0.5, lay.n_limited)
    b = lay.bounded
    lb, ub = lo[b].copy(), hi[b].copy()
    lb[~np.isfinite(lb)] = np.minimum(0.0, ub[~np.isfinite(lb)] - 1.0)
    x[b] = lb + (ub - lb) * rng.uniform(0.05, 0.95, len(b))
    has_lo, has_hi = pnet.bound_sides()
    return Iterate(x, rng.normal(0.0, 1.0, lay.m),
                   np.where(has_hi, rng.uniform(0.1, 1.0, len(b)), 0.0),
                   np.where(has_lo, rng.uniform(0.1, 1.0, len(b)), 0.0))


# ------------------------------------------------------------- network model

def network_admittance(net: Network) -> np.ndarray:
    """Dense bus admittance matrix (shunts and line charging included), built from scratch."""
    nb = len(net.buses)
    pos = net.bus_position
    y = np.zeros((nb, nb), dtype=complex)
    for br in net.branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        ys = complex(br.g, br.b)
        a = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
        half = 0.5j * br.b_charge
        y[f, f] += (ys + half) / (br.tap * br.tap)
        y[t, t] += ys + half
        y[f, t] -= ys / a.conjugate()
        y[t, f] -= ys / a
    for sh in net.shunts:
        y[pos[sh.bus], pos[sh.bus]] += complex(sh.g_sh, sh.b_sh)
    return y


def _bus_load(net: Network) -> np.ndarray:
    pos = net.bus_position
    s = np.zeros(len(net.buses), dtype=complex)
    for ld in net.loads:
        s[pos[ld.bus]] += complex(ld.p, ld.q)
    return s


def _series_currents(net: Network, volt: np.ndarray) -> list[tuple[int, float]]:
    """(branch index, limit excess) for each limited branch."""
    pos = net.bus_position
    out = []
    for k, br in enumerate(net.branches):
        if not br.limited:
            continue
        a = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
        vf, vt = volt[pos[br.from_bus]], volt[pos[br.to_bus]]
        i_s = abs(complex(br.g, br.b) * (vf / a - vt))
        if br.current_limit is not None:
            out.append((k, i_s - br.current_limit))
        else:
            out.append((k, abs(vf) / br.tap * i_s - br.power_limit))
    return out


def power_mismatch(iterate, net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus (dP, dQ) of ``V conj(Y V)`` against scheduled generation minus load."""
    x = iterate.x if isinstance(iterate, Iterate) else np.asarray(iterate, dtype=float)
    lay = VariableLayout(net)
    volt = x[lay.vr] + 1j * x[lay.vi]
    if np.any(np.abs(volt) ** 2 < 1e-12):
        raise DegenerateVoltageError("degenerate-voltage: |V|^2 below 1e-12")
    s_inj = volt * np.conj(network_admittance(net) @ volt)
    pos = net.bus_position
    sched = -_bus_load(net)
    pg, qg = x[lay.pg], x[lay.qg]
    for k, g in enumerate(net.generators):
        sched[pos[g.bus]] += complex(pg[k], qg[k])
    d = s_inj - sched
    return d.real, d.imag


# -------------------------------------------------------------- brute force

@dataclass
class OracleResult:
    objective: float
    p: np.ndarray
    q: np.ndarray
    grid_resolution: float
    voltages: np.ndarray
    samples: int = 0

    @property
    def dispatch(self) -> list[tuple[float, float]]:
        return list(zip(self.p.tolist(), self.q.tolist()))


class _Flow:
    """Dense rectangular power flow with fixed P at non-slack generators and
    |V|^2 set-points at generator buses."""

    def __init__(self, net: Network):
        if len(net.buses) > 3 or len(net.generators) > 2:
            raise OracleError("too-large", "oracle accepts at most 3 buses and 2 generators")
        if not net.generators:
            raise OracleError("no-feasible-sample", "network has no generator")
        self.net = net
        self.nb = len(net.buses)
        self.y = network_admittance(net)
        self.load = _bus_load(net)
        pos = net.bus_position
        self.gen_pos = np.array([pos[g.bus] for g in net.generators])
        self.ref = net.reference_position
        self.gbuses = sorted(set(self.gen_pos.tolist()))
        at_ref = [k for k, b in enumerate(self.gen_pos) if b == self.ref]
        self.slack = at_ref[0] if at_ref else 0
        self.free = [k for k in range(len(net.generators)) if k != self.slack]

    def solve(self, p_free: np.ndarray, vsq: np.ndarray, tol: float = 1e-10, iters: int = 40):
        nb, gb = self.nb, self.gbuses
        n_u = 2 * nb + len(gb) + 1
        vset = np.sqrt(vsq)
        u = np.zeros(n_u)
        u[:nb] = 1.0
        for j, b in enumerate(gb):
            u[b] = vset[j]

        def resid(u):
            volt = u[:nb] + 1j * u[nb:2 * nb]
            qb = u[2 * nb:2 * nb + len(gb)]
            ps = u[-1]
            sched = -self.load.copy()
            for k, pk in zip(self.free, p_free):
                sched[self.gen_pos[k]] += pk
            sched[self.gen_pos[self.slack]] += ps
            for j, b in enumerate(gb):
                sched[b] += 1j * qb[j]
            mis = volt * np.conj(self.y @ volt) - sched
            vs = np.array([abs(volt[b]) ** 2 for b in gb]) - vsq
            return np.concatenate([mis.real, mis.imag, vs, [volt[self.ref].imag]])

        ngb = len(gb)

        def jacobian(u):
            volt = u[:nb] + 1j * u[nb:2 * nb]
            cur = self.y @ volt
            d_vr = np.diag(np.conj(cur)) + np.diag(volt) @ np.conj(self.y)
            d_vi = 1j * np.diag(np.conj(cur)) - 1j * np.diag(volt) @ np.conj(self.y)
            jac = np.zeros((n_u, n_u))
            jac[:nb, :nb], jac[:nb, nb:2 * nb] = d_vr.real, d_vi.real
            jac[nb:2 * nb, :nb], jac[nb:2 * nb, nb:2 * nb] = d_vr.imag, d_vi.imag
            for j, b in enumerate(gb):
                jac[nb + b, 2 * nb + j] = -1.0
                jac[2 * nb + j, b] = 2 * u[b]
                jac[2 * nb + j, nb + b] = 2 * u[nb + b]
            jac[self.gen_pos[self.slack], -1] = -1.0
            jac[2 * nb + ngb, nb + self.ref] = 1.0
            return jac

        r = resid(u)
        for _ in range(iters):
            nr = np.abs(r).max()
            if nr < tol:
                return u
            try:
                du = np.linalg.solve(jacobian(u), -r)
            except np.linalg.LinAlgError:
                return None
            t = 1.0
            while t > 1e-4:
                r_new = resid(u + t * du)
                if np.abs(r_new).max() < nr:
                    break
                t *= 0.5
            else:
                return None
            u = u + t * du
            r = r_new
        return u if np.abs(r).max() < tol else None

    def margins(self, p_free, vsq):
        """Solve the flow and return (cost, margins, p, q, volt); margins >= 0 when feasible."""
        net = self.net
        u = self.solve(np.asarray(p_free, float), np.asarray(vsq, float))
        if u is None:
            return None
        nb, gb = self.nb, self.gbuses
        volt = u[:nb] + 1j * u[nb:2 * nb]
        q_bus = dict(zip(gb, u[2 * nb:2 * nb + len(gb)]))
        p = np.zeros(len(net.generators))
        p[self.free] = p_free
        p[self.slack] = u[-1]
        g_s = net.generators[self.slack]
        m = [p[self.slack] - g_s.p_min, g_s.p_max - p[self.slack]]
        # split each bus's Q over its generators in proportion to their ranges
        q = np.zeros(len(p))
        for b in gb:
            ks = [k for k in range(len(p)) if self.gen_pos[k] == b]
            lo = sum(net.generators[k].q_min for k in ks)
            hi = sum(net.generators[k].q_max for k in ks)
            m += [q_bus[b] - lo, hi - q_bus[b]]
            frac = 0.0 if hi == lo else min(max((q_bus[b] - lo) / (hi - lo), 0.0), 1.0)
            for k in ks:
                g = net.generators[k]
                q[k] = g.q_min + frac * (g.q_max - g.q_min)
        vm = np.abs(volt)
        for k, bus in enumerate(net.buses):
            m += [vm[k] - bus.v_min, bus.v_max - vm[k]]
        m += [-excess for _, excess in _series_currents(net, volt)]
        cost = sum(g.cost(p[k]) for k, g in enumerate(net.generators))
        return cost, np.array(m), p, q, volt

    def evaluate(self, p_free, vsq, tol=1e-7):
        """Cost and dispatch of a feasible sample, or None."""
        out = self.margins(p_free, vsq)
        if out is None or out[1].min(initial=0.0) < -tol:
            return None
        cost, _, p, q, volt = out
        return cost, p, q, volt


def brute_force_optimum(net: Network, resolution: float = 1e-3, coarse: int = 11,
                        keep: int = 4) -> OracleResult:
    """Grid search over non-slack P and generator-bus |V|^2 set-points, then local polishing.

    Every sample is checked by a dense power-flow solve.  The grid spacing
    is the coarser of ``resolution`` and the box width over ``coarse - 1``;
    the ``keep`` best samples are then polished with SLSQP on the same
    set-point variables (constraints evaluated through the power flow) to
    a step tolerance of ``resolution / 100``.
    """
    from scipy.optimize import minimize

    if resolution <= 0:
        raise ValueError("resolution must be positive")
    flow = _Flow(net)
    gens = net.generators
    lows = np.array([gens[k].p_min for k in flow.free]
                    + [net.buses[b].v_min ** 2 for b in flow.gbuses], dtype=float)
    highs = np.array([gens[k].p_max for k in flow.free]
                     + [net.buses[b].v_max ** 2 for b in flow.gbuses], dtype=float)
    nf = len(flow.free)
    if sum(ld.p for ld in net.loads) > sum(g.p_max for g in gens) + 1e-9:
        raise OracleError("no-feasible-sample", "load exceeds total generation capacity")

    def key(item):
        # lowest cost, then lowest P of the first generator
        return (round(item[1][0], 9), item[1][1][0])

    samples = 0
    found = []
    counts = np.maximum(1, np.minimum(coarse, np.ceil((highs - lows) / resolution) + 1)).astype(int)
    axes = [np.linspace(a, b, c) if b > a else np.array([a]) for a, b, c in zip(lows, highs, counts)]
    for point in itertools.product(*axes):
        point = np.array(point)
        samples += 1
        res = flow.evaluate(point[:nf], point[nf:])
        if res is not None:
            found.append((point, res))
    if not found:
        raise OracleError("no-feasible-sample", "no grid sample satisfies the power flow and bounds")
    found.sort(key=key)

    big = 1e6
    cache: dict[tuple, tuple | None] = {}

    def margins(z):
        k = tuple(z)
        if k not in cache:
            cache[k] = flow.margins(z[:nf], z[nf:])
        return cache[k]

    def fun(z):
        out = margins(z)
        return big if out is None else out[0]

    def cons(z):
        out = margins(z)
        return -np.ones(1) if out is None else out[1]

    best = found[0]
    for point, _ in found[:keep]:
        if len(point) == 0:
            break
        sol = minimize(fun, point, method="SLSQP", bounds=list(zip(lows, highs)),
                       constraints=[{"type": "ineq", "fun": cons}],
                       options={"ftol": 1e-12, "maxiter": 200, "eps": resolution / 100.0})
        samples += len(cache)
        cache.clear()
        z = np.clip(sol.x, lows, highs)
        res = flow.evaluate(z[:nf], z[nf:])
        if res is not None and key((z, res)) < key(best):
            best = (z, res)
    point, (cost, p, q, volt) = best
    return OracleResult(float(cost), p, q, resolution, volt, samples)
