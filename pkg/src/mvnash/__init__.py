"""Nash equilibria of competitive mean-variance portfolio games on binary lattices."""

__version__ = "0.1.0"

from .errors import MvNashError, NashViolation, SolverError, ValidationError
from .market import AgentSpec, Constant, MarketSpec, NodeFunction, NodeTable, PathFunction, PiecewiseDeterministic, TimeFunction, validate_market
from .nash import EquilibriumReport, classify, classify_marginal, classify_usual
from .simulator import SimConfig, simulate_profile, verify_nash
from .single_agent import best_response, market_factors
from .tree import Mode, TreeDriver, TreeProcess, build_driver

__all__ = [
    "AgentSpec",
    "Constant",
    "EquilibriumReport",
    "MarketSpec",
    "Mode",
    "MvNashError",
    "NashViolation",
    "NodeFunction",
    "NodeTable",
    "PathFunction",
    "PiecewiseDeterministic",
    "SimConfig",
    "SolverError",
    "TimeFunction",
    "TreeDriver",
    "TreeProcess",
    "ValidationError",
    "best_response",
    "build_driver",
    "classify",
    "classify_marginal",
    "classify_usual",
    "market_factors",
    "simulate_profile",
    "validate_market",
    "verify_nash",
]
