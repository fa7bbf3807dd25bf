"""Homotopy-parameterized current-voltage AC-OPF model.

Residuals, objective, first derivatives and Lagrangian Hessian of the
rectangular current-voltage formulation, with the incremental model
building embedding of loads, generator bounds, shunts, series elements,
taps/shifts and penalized slack current injections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import kernels
from .grid import Network
from .sparse import Pattern

__all__ = [
    "HomotopyParams",
    "ParameterizedNetwork",
    "VariableLayout",
    "Iterate",
    "DegenerateVoltageError",
    "apply_homotopy",
    "equality_residuals",
    "objective_value_gradient",
    "equality_jacobian",
    "lagrangian_hessian",
    "lagrangian_gradient",
    "generation_cost",
    "objective_terms",
    "flat_primal",
    "interior_projection",
    "series_current_magnitude",
    "auxiliary_values",
    "refresh_auxiliaries",
    "cost_scale",
    "bus_voltages",
    "generator_dispatch",
]

DEGENERATE_V2 = 1e-12


class DegenerateVoltageError(ArithmeticError):
    """Some bus has |V|^2 below 1e-12; injection currents are undefined."""


@dataclass(frozen=True)
class HomotopyParams:
    v: float = 0.0
    gamma: float = 10.0
    kappa: float = 0.5
    load_floor: float = 1e-4
    slack_weight: float = 1e3
    # infeasibility relaxation: slack currents enter KCL as (v + e) * I_F
    relaxation: float | None = None
    # v-scaled pull of V^SQ toward 1 that makes the flat start the trivial
    # solution; vanishes at v = 0
    anchor: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.v <= 1.0:
            raise ValueError(f"homotopy factor must lie in [0, 1], got {self.v}")
        if self.gamma <= 0 or self.kappa <= 0 or self.slack_weight <= 0:
            raise ValueError("gamma, kappa and slack_weight must be positive")
        if not 0.0 < self.load_floor < 1.0:
            raise ValueError("load_floor must lie in (0, 1)")
        if self.relaxation is not None and self.relaxation < 0:
            raise ValueError("relaxation must be nonnegative")
        if self.anchor < 0:
            raise ValueError("anchor must be nonnegative")

    def at(self, v: float) -> "HomotopyParams":
        return replace(self, v=float(v))

    @property
    def slack_coefficient(self) -> float:
        return self.v + (self.relaxation or 0.0)


class VariableLayout:
    """Index map of primal variables and equality rows.

    Primal blocks, in order: ``vr, vi, vsq, slack_r, slack_i`` (per bus),
    ``pg, qg`` (per generator), ``ir, ii, flow`` (per flow-limited branch).
    Equality rows: ``kcl_r, kcl_i, vsq_def`` (per bus), ``kvl_r, kvl_i,
    flow_def`` (per limited branch), then one reference-angle row.
    """

    def __init__(self, net: Network):
        nb, ng = len(net.buses), len(net.generators)
        self.limited = np.array([k for k, br in enumerate(net.branches) if br.limited], dtype=np.int64)
        nl = len(self.limited)
        self.n_bus, self.n_gen, self.n_limited = nb, ng, nl

        def block(start, size):
            return np.arange(start, start + size, dtype=np.int64)

        self.vr = block(0, nb)
        self.vi = block(nb, nb)
        self.vsq = block(2 * nb, nb)
        self.slack_r = block(3 * nb, nb)
        self.slack_i = block(4 * nb, nb)
        self.pg = block(5 * nb, ng)
        self.qg = block(5 * nb + ng, ng)
        base = 5 * nb + 2 * ng
        self.ir = block(base, nl)
        self.ii = block(base + nl, nl)
        self.flow = block(base + 2 * nl, nl)
        self.n = base + 3 * nl

        self.kcl_r = block(0, nb)
        self.kcl_i = block(nb, nb)
        self.vsq_def = block(2 * nb, nb)
        self.kvl_r = block(3 * nb, nl)
        self.kvl_i = block(3 * nb + nl, nl)
        self.flow_def = block(3 * nb + 2 * nl, nl)
        self.ref_row = 3 * nb + 3 * nl
        self.m = self.ref_row + 1

        self.bounded = np.concatenate([self.pg, self.qg, self.vsq, self.flow])

    def blocks(self) -> dict[str, np.ndarray]:
        names = ("vr", "vi", "vsq", "slack_r", "slack_i", "pg", "qg", "ir", "ii", "flow")
        return {name: getattr(self, name) for name in names}


@dataclass
class Iterate:
    """Primal/dual point; ``mu_upper``/``mu_lower`` run over bounded primals."""

    x: np.ndarray
    lam: np.ndarray
    mu_upper: np.ndarray
    mu_lower: np.ndarray

    def copy(self) -> "Iterate":
        return Iterate(self.x.copy(), self.lam.copy(), self.mu_upper.copy(), self.mu_lower.copy())


def _primal(it) -> np.ndarray:
    return it.x if isinstance(it, Iterate) else np.asarray(it, dtype=float)


def cost_scale(net: Network) -> float:
    """Largest marginal generation cost over the generator boxes (at least 1)."""
    best = 1.0
    for g in net.generators:
        reach = max(abs(g.p_min), abs(g.p_max), 1.0)
        best = max(best, abs(g.cost_b) + 2.0 * g.cost_c * reach)
    return best


@dataclass
class ParameterizedNetwork:
    """A :class:`Network` seen through homotopy factor ``params.v``."""

    net: Network
    params: HomotopyParams
    layout: VariableLayout
    # per branch
    br_from: np.ndarray
    br_to: np.ndarray
    g_hat: np.ndarray
    b_hat: np.ndarray
    b_charge: np.ndarray
    tap_hat: np.ndarray
    shift_hat: np.ndarray
    # per shunt
    sh_bus: np.ndarray
    g_sh_hat: np.ndarray
    b_sh_hat: np.ndarray
    # per generator
    gen_bus: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    cost_a: np.ndarray
    cost_b: np.ndarray
    cost_c: np.ndarray
    # per load
    load_bus: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    load_scale: float
    shunt_scale: float
    obj_scale: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def v(self) -> float:
        return self.params.v

    @cached_property
    def ybus(self) -> sp.csr_matrix:
        nb = self.layout.n_bus
        ys = self.g_hat + 1j * self.b_hat
        tap = self.tap_hat * np.exp(1j * self.shift_hat)
        ytt = ys + 0.5j * self.b_charge
        yff = ytt / (self.tap_hat ** 2)
        yft = -ys / np.conj(tap)
        ytf = -ys / tap
        f, t = self.br_from, self.br_to
        rows = np.concatenate([f, f, t, t, self.sh_bus])
        cols = np.concatenate([f, t, f, t, self.sh_bus])
        vals = np.concatenate([yff, yft, ytf, ytt, self.g_sh_hat + 1j * self.b_sh_hat])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nb, nb))

    @cached_property
    def bus_load(self) -> tuple[np.ndarray, np.ndarray]:
        nb = self.layout.n_bus
        pd = np.bincount(self.load_bus, weights=self.load_p, minlength=nb) * self.load_scale
        qd = np.bincount(self.load_bus, weights=self.load_q, minlength=nb) * self.load_scale
        return pd, qd

    @cached_property
    def ammeter_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Complex (c_from, c_to) with series current ``c_from*V_f + c_to*V_t``."""
        lim = self.layout.limited
        ys = (self.g_hat + 1j * self.b_hat)[lim]
        tap = (self.tap_hat * np.exp(1j * self.shift_hat))[lim]
        return ys / tap, -ys

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-primal (lower, upper); unbounded entries hold -inf / +inf."""
        key = "bounds"
        if key not in self._cache:
            lay = self.layout
            lo = np.full(lay.n, -np.inf)
            hi = np.full(lay.n, np.inf)
            lo[lay.pg], hi[lay.pg] = self.p_min, self.p_max
            lo[lay.qg], hi[lay.qg] = self.q_min, self.q_max
            vmin = np.array([b.v_min for b in self.net.buses])
            vmax = np.array([b.v_max for b in self.net.buses])
            lo[lay.vsq], hi[lay.vsq] = vmin ** 2, vmax ** 2
            lim = [self.net.branches[k] for k in lay.limited]
            caps = np.array([br.current_limit if br.current_limit is not None else br.power_limit
                             for br in lim], dtype=float)
            # F is a squared magnitude, so only its upper bound carries a multiplier
            hi[lay.flow] = caps ** 2
            self._cache[key] = (lo, hi)
        return self._cache[key]

    def bound_sides(self) -> tuple[np.ndarray, np.ndarray]:
        """Masks over ``layout.bounded``: which entries have a finite lower / upper bound."""
        if "sides" not in self._cache:
            lo, hi = self.bounds()
            b = self.layout.bounded
            self._cache["sides"] = (np.isfinite(lo[b]), np.isfinite(hi[b]))
        return self._cache["sides"]

    @property
    def power_limited(self) -> np.ndarray:
        """Boolean mask over limited branches: True where the limit is apparent power."""
        return np.array([self.net.branches[k].power_limit is not None for k in self.layout.limited],
                        dtype=bool)


def apply_homotopy(net: Network, h: HomotopyParams, layout: VariableLayout | None = None,
                   obj_scale: float = 1.0) -> ParameterizedNetwork:
    """Scale every device of ``net`` to homotopy factor ``h.v``."""
    v = h.v
    pos = net.bus_position
    layout = layout or VariableLayout(net)
    brs, gens, loads, shunts = net.branches, net.generators, net.loads, net.shunts

    def arr(values, dtype=float):
        return np.array(list(values), dtype=dtype)

    g = arr(br.g for br in brs)
    b = arr(br.b for br in brs)
    tap = arr(br.tap for br in brs)
    shift = arr(br.shift for br in brs)
    series_scale = 1.0 + v * h.gamma
    shunt_scale = min(1.0, max(0.0, 1.0 - v))
    p_min = arr(gn.p_min for gn in gens)
    p_max = arr(gn.p_max for gn in gens)
    q_min = arr(gn.q_min for gn in gens)
    q_max = arr(gn.q_max for gn in gens)
    if v != 0.0:
        g = g * series_scale
        b = b * series_scale
        tap = tap + v * (1.0 - tap)
        shift = shift - v * shift
        p_max = (1.0 - v) * p_max + v * h.kappa
        p_min = (1.0 - v) * p_min - v * h.kappa
        q_max = (1.0 - v) * q_max + v * h.kappa
        q_min = (1.0 - v) * q_min - v * h.kappa
    g_sh = arr(s.g_sh for s in shunts)
    b_sh = arr(s.b_sh for s in shunts)
    if shunt_scale != 1.0:
        g_sh = g_sh * shunt_scale
        b_sh = b_sh * shunt_scale
    return ParameterizedNetwork(
        net=net, params=h, layout=layout,
        br_from=arr((pos[br.from_bus] for br in brs), np.int64),
        br_to=arr((pos[br.to_bus] for br in brs), np.int64),
        g_hat=g, b_hat=b, b_charge=arr(br.b_charge for br in brs),
        tap_hat=tap, shift_hat=shift,
        sh_bus=arr((pos[s.bus] for s in shunts), np.int64), g_sh_hat=g_sh, b_sh_hat=b_sh,
        gen_bus=arr((pos[gn.bus] for gn in gens), np.int64),
        p_min=p_min, p_max=p_max, q_min=q_min, q_max=q_max,
        cost_a=arr(gn.cost_a for gn in gens), cost_b=arr(gn.cost_b for gn in gens),
        cost_c=arr(gn.cost_c for gn in gens),
        load_bus=arr((pos[ld.bus] for ld in loads), np.int64),
        load_p=arr(ld.p for ld in loads), load_q=arr(ld.q for ld in loads),
        load_scale=max(h.load_floor, 1.0 - v) if v > 0 else 1.0,
        shunt_scale=shunt_scale,
        obj_scale=obj_scale,
    )


# ---------------------------------------------------------------------------
# evaluation

def bus_voltages(layout: VariableLayout, x) -> tuple[np.ndarray, np.ndarray]:
    x = _primal(x)
    return x[layout.vr], x[layout.vi]


def generator_dispatch(layout: VariableLayout, x) -> tuple[np.ndarray, np.ndarray]:
    x = _primal(x)
    return x[layout.pg], x[layout.qg]


def _net_power(pnet: ParameterizedNetwork, x):
    lay = pnet.layout
    nb = lay.n_bus
    pd, qd = pnet.bus_load
    p = np.bincount(pnet.gen_bus, weights=x[lay.pg], minlength=nb) - pd
    q = np.bincount(pnet.gen_bus, weights=x[lay.qg], minlength=nb) - qd
    return p, q


def _check_voltage(vr, vi):
    s = vr * vr + vi * vi
    if s.size and s.min() < DEGENERATE_V2:
        k = int(np.argmin(s))
        raise DegenerateVoltageError(f"bus position {k} has |V|^2 = {s[k]:.3e}")


def _series_current(pnet: ParameterizedNetwork, x):
    lay = pnet.layout
    lim = lay.limited
    cf, ct = pnet.ammeter_coefficients
    vf = x[lay.vr][pnet.br_from[lim]] + 1j * x[lay.vi][pnet.br_from[lim]]
    vt = x[lay.vr][pnet.br_to[lim]] + 1j * x[lay.vi][pnet.br_to[lim]]
    return cf * vf + ct * vt


def equality_residuals(it, pnet: ParameterizedNetwork) -> np.ndarray:
    """Stacked equality residuals g(x) in layout row order."""
    x = _primal(it)
    lay = pnet.layout
    vr, vi = x[lay.vr], x[lay.vi]
    _check_voltage(vr, vi)
    p, q = _net_power(pnet, x)
    s = vr * vr + vi * vi
    inj_r = (p * vr + q * vi) / s
    inj_i = (p * vi - q * vr) / s
    current = pnet.ybus @ (vr + 1j * vi)
    w = pnet.params.slack_coefficient
    out = np.empty(lay.m)
    out[lay.kcl_r] = inj_r - current.real - w * x[lay.slack_r]
    out[lay.kcl_i] = inj_i - current.imag - w * x[lay.slack_i]
    out[lay.vsq_def] = x[lay.vsq] - s
    i_s = _series_current(pnet, x)
    ir, ii = x[lay.ir], x[lay.ii]
    out[lay.kvl_r] = ir - i_s.real
    out[lay.kvl_i] = ii - i_s.imag
    mag = ir * ir + ii * ii
    pl = pnet.power_limited
    if pl.any():
        f = pnet.br_from[lay.limited]
        sf = (vr[f] ** 2 + vi[f] ** 2) / pnet.tap_hat[lay.limited] ** 2
        mag = np.where(pl, sf * mag, mag)
    out[lay.flow_def] = x[lay.flow] - mag
    out[lay.ref_row] = vi[pnet.net.reference_position]
    return out


def objective_value_gradient(it, pnet: ParameterizedNetwork) -> tuple[float, np.ndarray]:
    """Generation cost (divided by ``pnet.obj_scale``) plus the slack penalty."""
    x = _primal(it)
    lay = pnet.layout
    pg = x[lay.pg]
    sc = pnet.obj_scale
    w = pnet.params.slack_weight
    sr, si = x[lay.slack_r], x[lay.slack_i]
    f = float(np.sum(pnet.cost_a + pnet.cost_b * pg + pnet.cost_c * pg * pg)) / sc
    f += w * float(sr @ sr + si @ si)
    grad = np.zeros(lay.n)
    grad[lay.pg] = (pnet.cost_b + 2.0 * pnet.cost_c * pg) / sc
    grad[lay.slack_r] = 2.0 * w * sr
    grad[lay.slack_i] = 2.0 * w * si
    rho = pnet.v * pnet.params.anchor
    if rho > 0.0:
        dv = x[lay.vsq] - 1.0
        f += rho * float(dv @ dv)
        grad[lay.vsq] = 2.0 * rho * dv
    return f, grad


def objective_terms(it, pnet: ParameterizedNetwork) -> np.ndarray:
    """The additive terms of the objective, one array entry per term."""
    x = _primal(it)
    lay = pnet.layout
    pg = x[lay.pg]
    w = pnet.params.slack_weight
    parts = [(pnet.cost_a + pnet.cost_b * pg + pnet.cost_c * pg * pg) / pnet.obj_scale,
             w * x[lay.slack_r] ** 2, w * x[lay.slack_i] ** 2]
    rho = pnet.v * pnet.params.anchor
    if rho > 0.0:
        parts.append(rho * (x[lay.vsq] - 1.0) ** 2)
    return np.concatenate(parts)


def generation_cost(pnet: ParameterizedNetwork, x) -> float:
    pg = _primal(x)[pnet.layout.pg]
    return float(np.sum(pnet.cost_a + pnet.cost_b * pg + pnet.cost_c * pg * pg))


# ---------------------------------------------------------------------------
# Jacobian

def _real_expand(rows_r, rows_i, cols_r, cols_i, c):
    """Triplets of the real 2x2 expansion of ``rows += c * cols`` (complex c)."""
    rows = np.concatenate([rows_r, rows_r, rows_i, rows_i])
    cols = np.concatenate([cols_r, cols_i, cols_r, cols_i])
    vals = np.concatenate([c.real, -c.imag, c.imag, c.real])
    return rows, cols, vals


class _JacobianStructure:
    """Constant part of the Jacobian plus the slots of the iterate-dependent part."""

    def __init__(self, pnet: ParameterizedNetwork):
        lay = pnet.layout
        nb = lay.n_bus
        lim = lay.limited
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(np.asarray(r, dtype=np.int64))
            cols.append(np.asarray(c, dtype=np.int64))
            vals.append(np.asarray(v, dtype=float))

        # network currents: -Y V
        y = pnet.ybus.tocoo()
        add(*_real_expand(lay.kcl_r[y.row], lay.kcl_i[y.row], lay.vr[y.col], lay.vi[y.col], -y.data))
        w = pnet.params.slack_coefficient
        add(lay.kcl_r, lay.slack_r, np.full(nb, -w))
        add(lay.kcl_i, lay.slack_i, np.full(nb, -w))
        add(lay.vsq_def, lay.vsq, np.ones(nb))
        cf, ct = pnet.ammeter_coefficients
        f, t = pnet.br_from[lim], pnet.br_to[lim]
        add(lay.kvl_r, lay.ir, np.ones(len(lim)))
        add(lay.kvl_i, lay.ii, np.ones(len(lim)))
        add(*_real_expand(lay.kvl_r, lay.kvl_i, lay.vr[f], lay.vi[f], -cf))
        add(*_real_expand(lay.kvl_r, lay.kvl_i, lay.vr[t], lay.vi[t], -ct))
        add(lay.flow_def, lay.flow, np.ones(len(lim)))
        add([lay.ref_row], [lay.vi[pnet.net.reference_position]], [1.0])
        self.n_const = sum(len(r) for r in rows)
        self.const_vals = np.concatenate(vals)

        # iterate-dependent slots (values filled per evaluation, zero-valued slots kept)
        bus = np.arange(nb)
        gb = pnet.gen_bus
        pl = pnet.power_limited
        fp = f[pl]
        var_rows = [lay.kcl_r, lay.kcl_r, lay.kcl_i, lay.kcl_i,
                    lay.kcl_r[gb], lay.kcl_r[gb], lay.kcl_i[gb], lay.kcl_i[gb],
                    lay.vsq_def, lay.vsq_def,
                    lay.flow_def, lay.flow_def,
                    lay.flow_def[pl], lay.flow_def[pl]]
        var_cols = [lay.vr[bus], lay.vi[bus], lay.vr[bus], lay.vi[bus],
                    lay.pg, lay.qg, lay.pg, lay.qg,
                    lay.vr, lay.vi,
                    lay.ir, lay.ii,
                    lay.vr[fp], lay.vi[fp]]
        self.rows = np.concatenate(rows + var_rows)
        self.cols = np.concatenate(cols + var_cols)
        self.pattern = Pattern(self.rows, self.cols, (lay.m, lay.n))


def _structure(pnet: ParameterizedNetwork) -> _JacobianStructure:
    if "jac" not in pnet._cache:
        pnet._cache["jac"] = _JacobianStructure(pnet)
    return pnet._cache["jac"]


def _injection_terms(pnet, x, lam=None):
    lay = pnet.layout
    vr, vi = x[lay.vr], x[lay.vi]
    _check_voltage(vr, vi)
    p, q = _net_power(pnet, x)
    if lam is None:
        lr = li = np.zeros(lay.n_bus)
    else:
        lr, li = lam[lay.kcl_r], lam[lay.kcl_i]
    return vr, vi, kernels.bus_injection(vr, vi, p, q, lr, li)


def _jacobian_values(pnet, x) -> np.ndarray:
    st = _structure(pnet)
    lay = pnet.layout
    vr, vi, (_, _, d_rr, d_ri, *_rest) = _injection_terms(pnet, x)
    s = vr * vr + vi * vi
    gb = pnet.gen_bus
    lim = lay.limited
    ir, ii = x[lay.ir], x[lay.ii]
    pl = pnet.power_limited
    f = pnet.br_from[lim]
    mag = ir * ir + ii * ii
    scale = np.ones(len(lim))
    if pl.any():
        scale = np.where(pl, (vr[f] ** 2 + vi[f] ** 2) / pnet.tap_hat[lim] ** 2, 1.0)
    fp = f[pl]
    inv_t2 = 1.0 / pnet.tap_hat[lim][pl] ** 2
    parts = [
        st.const_vals,
        d_rr, d_ri, d_ri, -d_rr,
        vr[gb] / s[gb], vi[gb] / s[gb], vi[gb] / s[gb], -vr[gb] / s[gb],
        -2.0 * vr, -2.0 * vi,
        -2.0 * scale * ir, -2.0 * scale * ii,
        -2.0 * inv_t2 * mag[pl] * vr[fp], -2.0 * inv_t2 * mag[pl] * vi[fp],
    ]
    return np.concatenate(parts)


def equality_jacobian(it, pnet: ParameterizedNetwork) -> sp.csc_matrix:
    """Sparse m-by-n Jacobian of :func:`equality_residuals` (fixed pattern)."""
    x = _primal(it)
    return _structure(pnet).pattern.assemble(_jacobian_values(pnet, x))


# ---------------------------------------------------------------------------
# Hessian of the Lagrangian

class _HessianStructure:
    def __init__(self, pnet: ParameterizedNetwork):
        lay = pnet.layout
        gb = pnet.gen_bus
        lim = lay.limited
        pl = pnet.power_limited
        fp = pnet.br_from[lim][pl]
        irp, iip = lay.ir[pl], lay.ii[pl]
        # lower triangle plus diagonal; mirrored on assembly
        diag = [lay.pg, lay.slack_r, lay.slack_i, lay.vr, lay.vi, lay.ir, lay.ii, lay.vsq]
        off_r = [lay.vi, lay.pg, lay.pg, lay.qg, lay.qg, irp, iip, irp, iip]
        off_c = [lay.vr, lay.vr[gb], lay.vi[gb], lay.vr[gb], lay.vi[gb], lay.vr[fp], lay.vr[fp],
                 lay.vi[fp], lay.vi[fp]]
        self.n_diag = sum(len(d) for d in diag)
        d = np.concatenate(diag)
        r = np.concatenate(off_r)
        c = np.concatenate(off_c)
        self.rows = np.concatenate([d, r, c])
        self.cols = np.concatenate([d, c, r])
        self.pattern = Pattern(self.rows, self.cols, (lay.n, lay.n))


def _hessian_values(pnet, x, lam) -> np.ndarray:
    """Values aligned with :class:`_HessianStructure` (diag, lower, upper)."""
    lay = pnet.layout
    vr, vi, inj = _injection_terms(pnet, x, lam)
    _, _, _, _, h_rr, h_ri, h_ii, cp, dp = inj
    lr, li = lam[lay.kcl_r], lam[lay.kcl_i]
    lsq = lam[lay.vsq_def]
    lim = lay.limited
    pl = pnet.power_limited
    lf = lam[lay.flow_def]
    ir, ii = x[lay.ir], x[lay.ii]
    f = pnet.br_from[lim]
    inv_t2 = 1.0 / pnet.tap_hat[lim] ** 2
    s_from = np.where(pl, (vr[f] ** 2 + vi[f] ** 2) * inv_t2, 1.0)
    w = pnet.params.slack_weight
    gb = pnet.gen_bus
    # power-limited rows: r = F - (vr^2+vi^2)(ir^2+ii^2)/t^2
    fp = f[pl]
    lfp = lf[pl] * inv_t2[pl]
    mag_p = (ir ** 2 + ii ** 2)[pl]
    vr_diag = h_rr - 2.0 * lsq
    vi_diag = h_ii - 2.0 * lsq
    if pl.any():
        vr_diag = vr_diag + np.bincount(fp, weights=-2.0 * lfp * mag_p, minlength=lay.n_bus)
        vi_diag = vi_diag + np.bincount(fp, weights=-2.0 * lfp * mag_p, minlength=lay.n_bus)
    # d2 hr/(dv dP) etc. from cp, dp
    lg_r, lg_i = lr[gb], li[gb]
    cpg, dpg = cp[gb], dp[gb]
    diag = [
        2.0 * pnet.cost_c / pnet.obj_scale,
        np.full(lay.n_bus, 2.0 * w), np.full(lay.n_bus, 2.0 * w),
        vr_diag, vi_diag,
        -2.0 * lf * s_from, -2.0 * lf * s_from,
        np.full(lay.n_bus, 2.0 * pnet.v * pnet.params.anchor),
    ]
    lower = [
        h_ri,
        -lg_r * cpg - lg_i * dpg,   # (P, vr)
        -lg_r * dpg + lg_i * cpg,   # (P, vi)
        -lg_r * dpg + lg_i * cpg,   # (Q, vr)
        lg_r * cpg + lg_i * dpg,    # (Q, vi)
        -4.0 * lfp * vr[fp] * ir[pl], -4.0 * lfp * vr[fp] * ii[pl],
        -4.0 * lfp * vi[fp] * ir[pl], -4.0 * lfp * vi[fp] * ii[pl],
    ]
    d = np.concatenate(diag)
    lo = np.concatenate(lower)
    return np.concatenate([d, lo, lo])


def _hess_structure(pnet) -> _HessianStructure:
    if "hess" not in pnet._cache:
        pnet._cache["hess"] = _HessianStructure(pnet)
    return pnet._cache["hess"]


def lagrangian_hessian(it, pnet: ParameterizedNetwork, lam=None) -> sp.csc_matrix:
    """Symmetric n-by-n Hessian of f + lam^T g (bound terms are linear)."""
    x = _primal(it)
    if lam is None:
        lam = it.lam if isinstance(it, Iterate) else np.zeros(pnet.layout.m)
    return _hess_structure(pnet).pattern.assemble(_hessian_values(pnet, x, np.asarray(lam, float)))


def lagrangian_gradient(it: Iterate, pnet: ParameterizedNetwork) -> np.ndarray:
    """grad f + J^T lam + mu_upper - mu_lower (the stationarity residual)."""
    _, grad = objective_value_gradient(it, pnet)
    jac = equality_jacobian(it, pnet)
    out = grad + jac.T @ it.lam
    b = pnet.layout.bounded
    np.add.at(out, b, it.mu_upper - it.mu_lower)
    return out


def series_current_magnitude(pnet: ParameterizedNetwork, x) -> np.ndarray:
    return np.abs(_series_current(pnet, _primal(x)))


def auxiliary_values(pnet: ParameterizedNetwork, x) -> tuple[np.ndarray, np.ndarray]:
    """V^SQ and F implied by the voltage and ammeter-current entries of ``x``."""
    lay = pnet.layout
    vr, vi = x[lay.vr], x[lay.vi]
    vsq = vr * vr + vi * vi
    ir, ii = x[lay.ir], x[lay.ii]
    mag = ir * ir + ii * ii
    pl = pnet.power_limited
    if pl.any():
        f = pnet.br_from[lay.limited]
        mag = np.where(pl, vsq[f] / pnet.tap_hat[lay.limited] ** 2 * mag, mag)
    return vsq, mag


def refresh_auxiliaries(pnet: ParameterizedNetwork, x: np.ndarray) -> np.ndarray:
    """Reset V^SQ and F to their defining values where that stays strictly inside the bounds.

    Both only enter their own defining rows and their boxes, so the reset
    removes the quadratic linearization error of a Newton step without
    touching any other residual block.
    """
    lay = pnet.layout
    lo, hi = pnet.bounds()
    out = x.copy()
    vsq, mag = auxiliary_values(pnet, x)
    for idx, val in ((lay.vsq, vsq), (lay.flow, mag)):
        ok = (val > lo[idx]) & (val < hi[idx])
        out[idx[ok]] = val[ok]
    return out


def flat_primal(pnet: ParameterizedNetwork) -> np.ndarray:
    """Flat start: V = 1+j0, V^2 = 1, zero powers and slacks, flows from the network."""
    lay = pnet.layout
    x = np.zeros(lay.n)
    x[lay.vr] = 1.0
    x[lay.vsq] = 1.0
    i_s = _series_current(pnet, x)
    x[lay.ir], x[lay.ii] = i_s.real, i_s.imag
    mag = np.abs(i_s) ** 2
    pl = pnet.power_limited
    x[lay.flow] = np.where(pl, mag / pnet.tap_hat[lay.limited] ** 2, mag) if len(mag) else mag
    return x


def interior_projection(x: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                        margin: float = 1e-4) -> np.ndarray:
    """Move bounded entries inside their box by ``margin * width`` (absolute for one-sided)."""
    x = x.copy()
    fin_lo, fin_hi = np.isfinite(lower), np.isfinite(upper)
    both = fin_lo & fin_hi
    pad = np.where(both, margin * (upper - lower), margin)
    pad = np.where(both & (pad <= 0), margin, pad)
    lo_edge = np.where(fin_lo, lower + pad, -np.inf)
    hi_edge = np.where(fin_hi, upper - pad, np.inf)
    x = np.minimum(np.maximum(x, lo_edge), hi_edge)
    return x
