"""Planning engine for zonal flexible bus services under stochastic demand."""

from .config import bundled, instance_from_dict, load_instance, scenarios_from_dict
from .domain import (DemandCategory, Fleet, Route, ServiceInstance, ServiceRequest, Zone,
                     build_converting_matrix, decompose_instance, od_load, shortest_direct_routes)
from .phase1 import P1Infeasible, Plan, ReliabilityVector, resolve_reliability, solve_p1
from .optimizer import OptimizerConfig, RunResult, deterministic_plan, run
from .oracle import Deployment, GridEvaluator, rho_grid, solve_p0_exact
from .phase2 import CostReport, evaluate, solve_p2
from .stochastic import sample_scenarios

__all__ = [
    "build_converting_matrix", "bundled", "CostReport", "decompose_instance",
    "DemandCategory", "Deployment", "deterministic_plan", "evaluate", "Fleet",
    "GridEvaluator", "instance_from_dict", "load_instance", "od_load", "OptimizerConfig",
    "P1Infeasible", "Plan", "ReliabilityVector", "resolve_reliability", "rho_grid", "Route",
    "run", "RunResult", "sample_scenarios", "scenarios_from_dict", "ServiceInstance",
    "ServiceRequest", "shortest_direct_routes", "solve_p0_exact", "solve_p1", "solve_p2",
    "Zone",
]
