import functools
from pathlib import Path

import pytest

from imbopf import load_case, solve_acopf, to_per_unit, validate_network
from imbopf.grid import Branch, Bus, Generator, Load, Network

DATA = Path(__file__).resolve().parents[1] / "src" / "imbopf" / "data"
SMALL_CASES = ["case2bus", "case3congested", "case5", "case9", "case14", "case30", "case57", "case118"]
ALL_CASES = SMALL_CASES + ["case2869pegase"]

_Y = 1 / complex(0.01, 0.1)


@functools.lru_cache(maxsize=None)
def bundled(name: str) -> Network:
    return validate_network(to_per_unit(load_case(DATA / f"{name}.m"), name=name))


@functools.lru_cache(maxsize=None)
def solved(name: str):
    """Default homotopy solve of a bundled case, shared across test modules."""
    return solve_acopf(bundled(name))


def one_bus() -> Network:
    return Network(100, [Bus(1, 0.9, 1.1, True)], [Generator(1, 0, 2, -1, 1, 5, 12, 3)], [Load(1, 0.7, 0.2)])


def two_bus() -> Network:
    return Network(
        100, [Bus(1, 0.95, 1.05, True), Bus(2, 0.95, 1.05)],
        [Generator(1, 0, 0.6, -1, 1, 0, 10, 2), Generator(2, 0, 1.0, -1, 1, 0, 30, 5)],
        [Load(2, 1.0, 0.3)], [Branch(1, 2, _Y.real, _Y.imag, 0.02)])


def three_bus_limited() -> Network:
    return Network(
        100, [Bus(1, 0.95, 1.05, True), Bus(2, 0.95, 1.05), Bus(3, 0.95, 1.05)],
        [Generator(1, 0, 2, -1, 1, 0, 10, 1), Generator(3, 0, 2, -1, 1, 0, 20, 1)],
        [Load(2, 1.2, 0.4)],
        [Branch(1, 2, _Y.real, _Y.imag, 0.02, current_limit=0.5),
         Branch(2, 3, _Y.real, _Y.imag, 0.02), Branch(1, 3, _Y.real, _Y.imag, 0.02)])


@pytest.fixture
def case9():
    return bundled("case9")
