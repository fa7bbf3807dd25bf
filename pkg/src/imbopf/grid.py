"""Grid domain types, per-unit conversion and structural validation."""

from __future__ import annotations

import cmath
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

__all__ = [
    "Bus",
    "Generator",
    "Load",
    "Branch",
    "Shunt",
    "Network",
    "NetworkError",
    "validate_network",
    "to_per_unit",
    "to_physical",
]


class NetworkError(ValueError):
    """Raised when a network violates a structural invariant.

    ``kind`` is one of ``duplicate-bus-id``, ``dangling-device-reference``,
    ``no-reference-bus``, ``multiple-reference-buses``, ``bound-inversion``,
    ``invalid-device`` or ``nonpositive-base``.
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass(frozen=True)
class Bus:
    index: int
    v_min: float
    v_max: float
    is_reference: bool = False


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_a: float = 0.0
    cost_b: float = 0.0
    cost_c: float = 0.0

    def cost(self, p):
        return self.cost_a + self.cost_b * p + self.cost_c * p * p


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class Branch:
    """Pi-model series element; tap and shift sit on the from side."""

    from_bus: int
    to_bus: int
    g: float
    b: float
    b_charge: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    kind: Literal["line", "transformer"] = "line"
    current_limit: float | None = None
    power_limit: float | None = None

    @property
    def limited(self) -> bool:
        return self.current_limit is not None or self.power_limit is not None


@dataclass(frozen=True)
class Shunt:
    bus: int
    g_sh: float
    b_sh: float


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    branches: tuple[Branch, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    name: str = field(default="", compare=False)

    def __post_init__(self):
        # accept lists from callers, store tuples so the value stays hashable
        for attr in ("buses", "generators", "loads", "branches", "shunts"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))

    @property
    def bus_position(self) -> dict[int, int]:
        return {bus.index: pos for pos, bus in enumerate(self.buses)}

    @property
    def reference_position(self) -> int:
        for pos, bus in enumerate(self.buses):
            if bus.is_reference:
                return pos
        raise NetworkError("no-reference-bus", "network has no reference bus")


def _finite(*values) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_network(net: Network) -> Network:
    """Check every type invariant of ``net`` and return it unchanged.

    Raises :class:`NetworkError` on the first violation found.
    """
    positions: dict[int, int] = {}
    for pos, bus in enumerate(net.buses):
        if bus.index in positions:
            raise NetworkError("duplicate-bus-id", f"bus {bus.index} appears twice")
        positions[bus.index] = pos
        if not _finite(bus.v_min, bus.v_max) or bus.v_min <= 0:
            raise NetworkError("invalid-device", f"bus {bus.index} has invalid voltage bounds")
        if bus.v_min > bus.v_max:
            raise NetworkError(
                "bound-inversion", f"bus {bus.index}: v_min={bus.v_min} > v_max={bus.v_max}"
            )
    if not positions:
        raise NetworkError("no-reference-bus", "network has no buses")

    def check_bus(ref, what):
        if ref not in positions:
            raise NetworkError("dangling-device-reference", f"{what} references missing bus {ref}")

    for k, gen in enumerate(net.generators):
        check_bus(gen.bus, f"generator {k}")
        if not _finite(gen.p_min, gen.p_max, gen.q_min, gen.q_max, gen.cost_a, gen.cost_b, gen.cost_c):
            raise NetworkError("invalid-device", f"generator {k} has non-finite data")
        if gen.p_min > gen.p_max:
            raise NetworkError("bound-inversion", f"generator {k}: p_min > p_max")
        if gen.q_min > gen.q_max:
            raise NetworkError("bound-inversion", f"generator {k}: q_min > q_max")
        if gen.cost_c < 0:
            raise NetworkError("invalid-device", f"generator {k}: negative quadratic cost")
    for k, load in enumerate(net.loads):
        check_bus(load.bus, f"load {k}")
        if not _finite(load.p, load.q):
            raise NetworkError("invalid-device", f"load {k} has non-finite demand")
    for k, sh in enumerate(net.shunts):
        check_bus(sh.bus, f"shunt {k}")
        if not _finite(sh.g_sh, sh.b_sh):
            raise NetworkError("invalid-device", f"shunt {k} has non-finite admittance")
    for k, br in enumerate(net.branches):
        check_bus(br.from_bus, f"branch {k}")
        check_bus(br.to_bus, f"branch {k}")
        if br.from_bus == br.to_bus:
            raise NetworkError("invalid-device", f"branch {k} is a self loop")
        if not _finite(br.g, br.b, br.b_charge, br.tap, br.shift):
            raise NetworkError("invalid-device", f"branch {k} has non-finite parameters")
        if br.tap <= 0:
            raise NetworkError("invalid-device", f"branch {k}: tap must be positive")
        if br.kind == "line" and (br.tap != 1.0 or br.shift != 0.0):
            raise NetworkError("invalid-device", f"branch {k}: lines carry tap 1 and shift 0")
        if br.current_limit is not None and br.power_limit is not None:
            raise NetworkError("invalid-device", f"branch {k} has both a current and a power limit")
        for lim in (br.current_limit, br.power_limit):
            if lim is not None and not (math.isfinite(lim) and lim > 0):
                raise NetworkError("invalid-device", f"branch {k}: flow limit must be positive")

    refs = [pos for pos, bus in enumerate(net.buses) if bus.is_reference]
    if not refs:
        raise NetworkError("no-reference-bus", "no bus is flagged as reference")

    adjacency: list[list[int]] = [[] for _ in net.buses]
    for br in net.branches:
        f, t = positions[br.from_bus], positions[br.to_bus]
        adjacency[f].append(t)
        adjacency[t].append(f)
    component = [-1] * len(net.buses)
    for start in range(len(net.buses)):
        if component[start] >= 0:
            continue
        component[start] = start
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in adjacency[node]:
                if component[nxt] < 0:
                    component[nxt] = start
                    queue.append(nxt)
    seen: dict[int, int] = {}
    for pos in refs:
        comp = component[pos]
        if comp in seen:
            raise NetworkError(
                "multiple-reference-buses",
                f"buses {net.buses[seen[comp]].index} and {net.buses[pos].index} share an island",
            )
        seen[comp] = pos
    for pos, bus in enumerate(net.buses):
        if component[pos] not in seen:
            raise NetworkError("no-reference-bus", f"bus {bus.index} lies on an island without reference")
    return net


# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 11, 12
GEN_BUS, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 0, 3, 4, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 5, 8, 9, 10

FlowLimitMode = Literal["mixed", "current", "power"]

# infinite generator limits in case files are clamped to this many MVA
UNBOUNDED_MVA = 1e4


def _clamp(value: float) -> float:
    return float(np.clip(value, -UNBOUNDED_MVA, UNBOUNDED_MVA))


def to_per_unit(raw, base_mva: float | None = None, flow_limits: FlowLimitMode = "mixed",
                name: str = "") -> Network:
    """Convert a :class:`~imbopf.matpower.RawCase` into a per-unit :class:`Network`.

    Out-of-service buses (type 4), generators and branches are dropped
    together with everything attached to a dropped bus.  A nonzero
    ``rateA`` becomes a current limit on lines and a power limit on
    transformers (``flow_limits="mixed"``); ``"current"`` and ``"power"``
    apply one kind to every branch.
    """
    base = raw.base_mva if base_mva is None else base_mva
    if not (base > 0):
        raise NetworkError("nonpositive-base", f"base MVA must be positive, got {base}")
    if flow_limits not in ("mixed", "current", "power"):
        raise ValueError(f"unknown flow limit mode {flow_limits!r}")

    buses, loads, shunts = [], [], []
    alive = set()
    for row in raw.bus_table:
        if int(row[BUS_TYPE]) == 4:
            continue
        idx = int(row[BUS_I])
        alive.add(idx)
        buses.append(Bus(idx, float(row[VMIN]), float(row[VMAX]), int(row[BUS_TYPE]) == 3))
        if row[PD] != 0 or row[QD] != 0:
            loads.append(Load(idx, row[PD] / base, row[QD] / base))
        if row[GS] != 0 or row[BS] != 0:
            shunts.append(Shunt(idx, row[GS] / base, row[BS] / base))

    gens = []
    for row, cost in zip(raw.gen_table, raw.gencost_table):
        if row[GEN_STATUS] <= 0 or int(row[GEN_BUS]) not in alive:
            continue
        c2, c1, c0 = _poly_coefficients(cost)
        gens.append(Generator(
            bus=int(row[GEN_BUS]),
            p_min=_clamp(row[PMIN]) / base, p_max=_clamp(row[PMAX]) / base,
            q_min=_clamp(row[QMIN]) / base, q_max=_clamp(row[QMAX]) / base,
            cost_a=c0, cost_b=c1 * base, cost_c=c2 * base * base,
        ))

    branches = []
    for row in raw.branch_table:
        f, t = int(row[F_BUS]), int(row[T_BUS])
        if row[BR_STATUS] <= 0 or f not in alive or t not in alive:
            continue
        y = 1.0 / complex(row[BR_R], row[BR_X])
        ratio, shift = float(row[TAP]), float(row[SHIFT])
        is_xf = ratio != 0.0 or shift != 0.0
        rate = row[RATE_A] / base if row[RATE_A] > 0 else None
        use_power = flow_limits == "power" or (flow_limits == "mixed" and is_xf)
        branches.append(Branch(
            from_bus=f, to_bus=t, g=y.real, b=y.imag, b_charge=float(row[BR_B]),
            tap=ratio if ratio != 0.0 else 1.0, shift=math.radians(shift),
            kind="transformer" if is_xf else "line",
            current_limit=None if use_power else rate,
            power_limit=rate if use_power else None,
        ))
    return Network(base, buses, gens, loads, branches, shunts, name=name)


def _poly_coefficients(cost_row) -> tuple[float, float, float]:
    """Return (c2, c1, c0) from a polynomial gencost row, zero-padded."""
    n = int(cost_row[3])
    coeffs = [float(c) for c in cost_row[4:4 + n]]
    coeffs = [0.0] * (3 - len(coeffs)) + coeffs
    return coeffs[-3], coeffs[-2], coeffs[-1]


def to_physical(net: Network):
    """Inverse of :func:`to_per_unit` for in-service data (MW, MVAr, degrees)."""
    from .matpower import RawCase

    base = net.base_mva
    load_at: dict[int, list[float]] = {}
    for load in net.loads:
        acc = load_at.setdefault(load.bus, [0.0, 0.0])
        acc[0] += load.p * base
        acc[1] += load.q * base
    shunt_at: dict[int, list[float]] = {}
    for sh in net.shunts:
        acc = shunt_at.setdefault(sh.bus, [0.0, 0.0])
        acc[0] += sh.g_sh * base
        acc[1] += sh.b_sh * base
    bus_rows = []
    for bus in net.buses:
        pd, qd = load_at.get(bus.index, (0.0, 0.0))
        gs, bs = shunt_at.get(bus.index, (0.0, 0.0))
        bus_rows.append([bus.index, 3 if bus.is_reference else 1, pd, qd, gs, bs,
                         1, 1.0, 0.0, 0.0, 1, bus.v_max, bus.v_min])
    gen_rows, cost_rows = [], []
    for gen in net.generators:
        gen_rows.append([gen.bus, 0.0, 0.0, gen.q_max * base, gen.q_min * base, 1.0, base, 1,
                         gen.p_max * base, gen.p_min * base])
        cost_rows.append([2, 0, 0, 3, gen.cost_c / base**2, gen.cost_b / base, gen.cost_a])
    branch_rows = []
    for br in net.branches:
        z = 1.0 / complex(br.g, br.b)
        lim = br.current_limit if br.current_limit is not None else br.power_limit
        ratio = 0.0 if br.kind == "line" else br.tap
        branch_rows.append([br.from_bus, br.to_bus, z.real, z.imag, br.b_charge,
                            0.0 if lim is None else lim * base, 0.0, 0.0,
                            ratio, math.degrees(br.shift), 1, -360.0, 360.0])
    return RawCase(
        base_mva=base,
        bus_table=np.array(bus_rows, dtype=float).reshape(-1, 13),
        gen_table=np.array(gen_rows, dtype=float).reshape(-1, 10),
        branch_table=np.array(branch_rows, dtype=float).reshape(-1, 13),
        gencost_table=np.array(cost_rows, dtype=float).reshape(-1, 7),
    )


def series_admittance(br: Branch) -> complex:
    return complex(br.g, br.b)


def complex_tap(br: Branch) -> complex:
    return cmath.rect(br.tap, br.shift)
