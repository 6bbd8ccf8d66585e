"""Linepack depletion simulation for tree-structured isothermal gas networks.

Three ways of closing the otherwise singular pipe-network ODE are provided:
a constant-density slack node, a saturating (sigmoid) source and a balancing
node whose density is algebraic.
"""
from .balancing import BalancingSystem, build_balancing_system
from .dynamics import CompressorTransition, DepletionError, Inputs, LoadRamp, linepack, rank_report
from .integrator import IntegratorConfig, Trajectory, integrate, simulate, survival_time
from .network import (
    DiscretizedNetwork,
    Network,
    NetworkError,
    NetworkSpec,
    build_matrices,
    build_network,
    discretize,
    load_network,
)
from .scenario import RunReport, Scenario, TechniqueConfig, load_scenario, run_batch, run_scenario
from .sigmoid import SigmoidSource, SigmoidSystem, build_sigmoid_system
from .slack import SlackSystem, build_slack_system
from .steady import SteadyStateError, solve_steady

__version__ = "0.1.0"

__all__ = [
    "BalancingSystem", "CompressorTransition", "DepletionError", "DiscretizedNetwork", "Inputs",
    "IntegratorConfig", "LoadRamp", "Network", "NetworkError", "NetworkSpec", "RunReport", "Scenario",
    "SigmoidSource", "SigmoidSystem", "SlackSystem", "SteadyStateError", "TechniqueConfig", "Trajectory",
    "build_balancing_system", "build_matrices", "build_network", "build_sigmoid_system",
    "build_slack_system", "discretize", "integrate", "linepack", "load_network", "load_scenario",
    "rank_report", "run_batch", "run_scenario", "simulate", "solve_steady", "survival_time",
]
