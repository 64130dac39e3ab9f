"""Leader-following optimal coordination for nonlinear multi-agent systems.

A simulation and learning engine for differential graphical games: agents
on a weighted digraph synchronize to a leader while minimizing coupled
quadratic costs.  Local value functions are approximated with tanh-basis
models whose weights adapt online from the Hamiltonian residual, or are fit
offline by policy iteration; a verification testkit re-derives every
checkable claim through an independent route.
"""
from .graph import DiGraph, ring_topology, laplacian, coupling_matrix, coupling_row, is_strongly_connected
from .dynamics import (
    VectorFieldSpec,
    AgentModel,
    builtin_agent,
    builtin_field,
    consensus_error,
    consensus_errors,
    global_error,
    error_rate,
)
from .gfhm import GfhmCritic, default_critic
from .controller import (
    CostSpec,
    LearnerGains,
    ProbingSpec,
    PolicyIterationSettings,
    policy_evaluation_lsq,
    run_policy_iteration,
)
from .simulator import (
    Scenario,
    TrajectoryLog,
    RunSummary,
    rk4_step,
    run_online,
    simulate_policies,
    detect_convergence,
    cost_integral,
    collect_run_stats,
)
from .testkit import CheckReport, run_all_checks
from .cli import load_scenario, paper_benchmark, scenario_from_config, scenario_to_config

__version__ = "0.1.0"

__all__ = [
    "DiGraph",
    "ring_topology",
    "laplacian",
    "coupling_matrix",
    "coupling_row",
    "is_strongly_connected",
    "VectorFieldSpec",
    "AgentModel",
    "builtin_agent",
    "builtin_field",
    "consensus_error",
    "consensus_errors",
    "global_error",
    "error_rate",
    "GfhmCritic",
    "default_critic",
    "CostSpec",
    "LearnerGains",
    "ProbingSpec",
    "PolicyIterationSettings",
    "policy_evaluation_lsq",
    "run_policy_iteration",
    "Scenario",
    "TrajectoryLog",
    "RunSummary",
    "rk4_step",
    "run_online",
    "simulate_policies",
    "detect_convergence",
    "cost_integral",
    "collect_run_stats",
    "CheckReport",
    "run_all_checks",
    "load_scenario",
    "paper_benchmark",
    "scenario_from_config",
    "scenario_to_config",
    "__version__",
]
