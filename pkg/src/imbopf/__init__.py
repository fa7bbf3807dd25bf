"""AC optimal power flow in current-voltage form, solved by a homotopy-driven interior point method."""

from .grid import Network, NetworkError, to_per_unit, to_physical, validate_network
from .matpower import CaseFormatError, load_case, parse_case
from .formulation import HomotopyParams
from .pdip import SolverOptions
from .homotopy import ControllerSettings, SolveReport, solve_acopf, verify_report

__version__ = "0.1.0"

__all__ = [
    "CaseFormatError",
    "ControllerSettings",
    "HomotopyParams",
    "Network",
    "NetworkError",
    "SolveReport",
    "SolverOptions",
    "load_case",
    "parse_case",
    "solve_acopf",
    "to_per_unit",
    "to_physical",
    "validate_network",
    "verify_report",
]
