import dataclasses
import math

import numpy as np
import pytest

from imbopf import NetworkError, parse_case, to_per_unit, to_physical, validate_network
from imbopf.grid import UNBOUNDED_MVA, Branch, Bus, Generator, Load, Network

from conftest import bundled, two_bus


def minimal():
    return Network(100, [Bus(1, 0.9, 1.1, True), Bus(2, 0.9, 1.1)], [Generator(1, 0, 1, -1, 1)],
                   [Load(2, 0.5, 0.1)], [Branch(1, 2, 1.0, -10.0)])


def test_minimal_network_is_accepted():
    net = minimal()
    assert validate_network(net) is net


@pytest.mark.parametrize("mutate, kind", [
    (lambda n: dataclasses.replace(n, generators=(Generator(99, 0, 1, -1, 1),)), "dangling-device-reference"),
    (lambda n: dataclasses.replace(n, buses=(Bus(1, 1.1, 0.9, True), n.buses[1])), "bound-inversion"),
    (lambda n: dataclasses.replace(n, buses=(n.buses[0], Bus(1, 0.9, 1.1))), "duplicate-bus-id"),
    (lambda n: dataclasses.replace(n, buses=(Bus(1, 0.9, 1.1), n.buses[1])), "no-reference-bus"),
    (lambda n: dataclasses.replace(n, buses=(n.buses[0], Bus(2, 0.9, 1.1, True))), "multiple-reference-buses"),
    (lambda n: dataclasses.replace(n, generators=(Generator(1, 2, 1, -1, 1),)), "bound-inversion"),
    (lambda n: dataclasses.replace(n, branches=(Branch(1, 1, 1.0, -10.0),)), "invalid-device"),
])
def test_invariant_violations(mutate, kind):
    with pytest.raises(NetworkError) as err:
        validate_network(mutate(minimal()))
    assert err.value.kind == kind


def test_island_without_reference_rejected():
    net = dataclasses.replace(minimal(), buses=minimal().buses + (Bus(3, 0.9, 1.1),),
                              loads=(Load(3, 0.1, 0.0),))
    with pytest.raises(NetworkError) as err:
        validate_network(net)
    assert err.value.kind == "no-reference-bus"


CASE = """function mpc = t
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
 2 1 50 20 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 30 -30 1 100 1 100 10;
];
mpc.branch = [
 1 2 0.01 0.1 0.02 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
 2 0 0 3 0.01 2 5;
];
"""


def test_per_unit_conversion():
    net = to_per_unit(parse_case(CASE))
    g = net.generators[0]
    assert g.p_max == pytest.approx(1.0)
    assert g.p_min == pytest.approx(0.1)
    assert net.loads[0].p == pytest.approx(0.5)
    # cost in $/h with P in p.u.: c2*(100P)^2 + c1*100P + c0
    assert (g.cost_a, g.cost_b, g.cost_c) == pytest.approx((5.0, 200.0, 100.0))
    y = 1 / complex(0.01, 0.1)
    assert complex(net.branches[0].g, net.branches[0].b) == pytest.approx(y)


def test_nonpositive_base():
    with pytest.raises(NetworkError) as err:
        to_per_unit(parse_case(CASE), base_mva=0)
    assert err.value.kind == "nonpositive-base"


def test_infinite_generator_limits_are_clamped():
    text = CASE.replace("1 0 0 30 -30 1 100 1 100 10", "1 0 0 Inf -Inf 1 100 1 100 10")
    g = validate_network(to_per_unit(parse_case(text))).generators[0]
    assert g.q_max == pytest.approx(UNBOUNDED_MVA / 100)
    assert g.q_min == pytest.approx(-UNBOUNDED_MVA / 100)


def test_physical_round_trip():
    net = bundled("case9")
    phys = to_physical(net)
    assert phys.base_mva == net.base_mva
    back = to_per_unit(phys, name=net.name)
    assert back.buses == net.buses and back.loads == net.loads and back.shunts == net.shunts
    for a, b in zip(back.generators, net.generators):
        assert a.bus == b.bus
        assert np.allclose(dataclasses.astuple(a)[1:], dataclasses.astuple(b)[1:], rtol=1e-12)
    for a, b in zip(back.branches, net.branches):
        assert (a.from_bus, a.to_bus, a.kind) == (b.from_bus, b.to_bus, b.kind)
        assert np.allclose([a.g, a.b, a.b_charge, a.tap, a.shift], [b.g, b.b, b.b_charge, b.tap, b.shift],
                           rtol=1e-12, atol=1e-14)
        assert a.current_limit == pytest.approx(b.current_limit)


def test_rate_a_becomes_flow_limit():
    net = bundled("case3congested")
    lim = [br for br in net.branches if br.limited]
    assert len(lim) == 1 and lim[0].current_limit == pytest.approx(0.5)
    power = to_per_unit(load_case_congested(), flow_limits="power")
    assert [br.power_limit for br in power.branches if br.limited] == [pytest.approx(0.5)]


def load_case_congested():
    from imbopf import load_case
    from conftest import DATA
    return load_case(DATA / "case3congested.m")


def test_generator_cost_polynomial():
    g = two_bus().generators[1]
    assert g.cost(0.5) == pytest.approx(30 * 0.5 + 5 * 0.25)
    assert math.isclose(g.cost(0.0), g.cost_a)
