"""Reliability-gradient outer loop.

The loop solves phase 1 at the current reliabilities, prices the resulting
deployment by phase 2 on a fixed scenario set (common random numbers), and
estimates one-sided finite differences by bumping each component just far
enough for the phase-1 objective to move.  Step sizes follow the An and Lo
rule until the incumbent stalls, then switch to Adam.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .domain import M1, ServiceInstance, build_converting_matrix
from .oracle import Deployment
from .phase1 import (DEFAULT_BACKEND, P1Infeasible, Plan, ReliabilityVector, check_plan,
                     solve_p1, solve_p1_resolved)
from .phase2 import NODE_LIMIT, CostReport, evaluate
from .stochastic import Scenario, reliability_for_volume, sample_scenarios

log = logging.getLogger(__name__)

EPS_DETOUR = 1e-9
# past the phase-1 solver's feasibility tolerance, so a bumped constraint really breaks
PUSH_DETOUR = 1e-6
RHO_MAX = 1.0 - 1e-9
_FLOOR_TOL = 1e-9
_CHECK_TOL = 1e-7


# -- step bounds -------------------------------------------------------------------------

def _ratio(slack: float, step: float) -> float:
    if step <= 0.0:
        return math.inf
    return slack / step


def _bumped_ok(instance: ServiceInstance, plan: Plan, v: int, cid: str, extra: int) -> bool:
    y = dict(plan.y)
    y[(cid, v)] = y.get((cid, v), 0) + extra
    delta = [sum(n for (e, _), n in y.items() if e == c.id) for c in instance.categories]
    trial = Plan(plan.routes, y, plan.cost, tuple(delta), plan.tau2)
    return not check_plan(instance, trial, delta, plan.tau2, tol=_CHECK_TOL)


def vehicle_demand_increment(instance: ServiceInstance, plan: Plan, v: int, cid: str) -> int:
    """Extra requests of category ``cid`` vehicle ``v`` absorbs with its plan unchanged.

    The closed-form bound assumes every extra request lengthens a zone
    detour by at most ``tau2``.  That fails when the vehicle does not stop in
    the zone yet, so the bound is also capped by re-checking the plan.
    """
    rid = plan.routes[v]
    if rid is None:
        return 0
    route = instance.route(rid)
    cat = instance.category(cid)
    seg = route.segment(cat.od)
    if seg is None:
        return 0
    cap = instance.fleet.capacity
    cmat = build_converting_matrix(route, instance.od_set, M1)
    zeta = plan.zeta(instance, v)
    load = cmat.load([zeta.get(od, 0) for od in instance.od_set])
    bound = float(np.min(cap - load[seg[0]:seg[1]])) / cat.passengers
    tau = dict(zip(instance.zone_ids, plan.tau2))
    for z in (cat.origin, cat.dest):
        slack = instance.zone(z).max_detour - plan.detour.get((v, z), 0.0)
        bound = min(bound, _ratio(slack, tau[z]))
    eps = max(0, int(math.floor(bound + _FLOOR_TOL)))
    k = 0
    while k < eps and _bumped_ok(instance, plan, v, cid, k + 1):
        k += 1
    return k


def max_demand_increment(plan: Plan, instance: ServiceInstance, category: str) -> int:
    """Total extra volume of ``category`` the current routes absorb (sum over vehicles)."""
    return sum(vehicle_demand_increment(instance, plan, v, category) for v in plan.used)


def max_detour_increment(plan: Plan, instance: ServiceInstance, zone: str,
                         exact: bool = False) -> float:
    """Largest rise of the segment detour in ``zone`` that the current plan tolerates.

    By default each vehicle's slack is divided by ``y~ + 1e-9``, which is
    conservative: a planned detour grows by ``(y~ - 1)`` per unit of segment
    detour.  ``exact=True`` uses that growth rate instead and returns the
    point where the tightest vehicle's constraint becomes active.
    """
    zobj = instance.zone(zone)
    modes = instance.detour_modes
    best = zobj.max_detour / EPS_DETOUR
    for v in plan.used:
        route = instance.route(plan.routes[v])
        if zone not in route.zone_sequence:
            continue
        n = plan.y_tilde.get((v, zone), 0)
        if exact:
            if n < 2:
                continue
            rate = n - 1.0
        else:
            rate = n + EPS_DETOUR
        t = plan.detour.get((v, zone), 0.0)
        if "zone" in modes:
            best = min(best, (zobj.max_detour - t) / rate)
        # the trip and OD budgets share the same per-request growth
        if "trip" in modes:
            used = sum(plan.detour.get((v, z), 0.0) for z in dict.fromkeys(route.zone_sequence))
            best = min(best, (instance.trip_detour_limit - used) / rate)
        if "od" in modes:
            for od in instance.od_set:
                lim = instance.od_limit(od)
                zs = dict.fromkeys(route.zones_between(od))
                if math.isfinite(lim) and zone in zs:
                    used = sum(plan.detour.get((v, z), 0.0) for z in zs)
                    best = min(best, (lim - used) / rate)
    return max(0.0, best)


# -- state -------------------------------------------------------------------------------

@dataclass
class Hyperparameters:
    lam: float | Callable[[int], float] = 0.005
    gamma: float = 0.05
    alpha: float | Callable[[int], float] = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6

    def lam_at(self, k: int) -> float:
        return self.lam(k) if callable(self.lam) else self.lam

    def alpha_at(self, k: int) -> float:
        return self.alpha(k) if callable(self.alpha) else self.alpha


class SolutionCache:
    """Expected total cost per deployment; vehicle order is irrelevant."""

    def __init__(self, instance: ServiceInstance, scenarios: Sequence[Scenario],
                 backend: str = DEFAULT_BACKEND, node_limit: int | None = NODE_LIMIT):
        self.instance = instance
        self.scenarios = list(scenarios)
        self.backend = backend
        self.node_limit = node_limit
        self.entries: dict[Deployment, CostReport] = {}
        self.p2_cache: dict = {}
        self.solves = 0

    def __contains__(self, plan: Plan) -> bool:
        return Deployment.from_plan(plan) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def report(self, plan: Plan) -> CostReport:
        key = Deployment.from_plan(plan)
        if key not in self.entries:
            self.solves += 1
            self.entries[key] = evaluate(self.instance, key.to_plan(self.instance),
                                         self.scenarios, self.backend, cache=self.p2_cache,
                                         node_limit=self.node_limit)
        return self.entries[key]

    def cost(self, plan: Plan) -> float:
        return self.report(plan).total


@dataclass
class OptimizerState:
    rho: np.ndarray
    k: int = 1
    best_rho: np.ndarray | None = None
    best_plan: Plan | None = None
    best_cost: float = math.inf
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    adam_steps: int = 0
    adam: bool = False
    stall: int = 0
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    def record(self, rho: np.ndarray, plan: Plan, cost: float) -> bool:
        """Update the incumbent; returns whether it improved."""
        if cost < self.best_cost - 1e-12:
            self.best_rho, self.best_plan, self.best_cost = rho.copy(), plan, cost
            self.stall = 0
            return True
        self.stall += 1
        return False


# -- sensitivities -----------------------------------------------------------------------

@dataclass
class Probe:
    """Outcome of bumping one reliability component."""

    component: int
    gradient: float
    rho: float | None = None
    cost: float | None = None
    bumps: int = 0
    note: str = ""


def _probe_volume(instance, plan, rho, e, cache, p1_cache, backend, max_bumps) -> Probe:
    cat = instance.categories[e]
    base = cache.cost(plan)
    cur = plan
    delta = list(plan.delta)
    for bump in range(1, max_bumps + 1):
        delta[e] += max_demand_increment(cur, instance, cat.id) + 1
        r_new = reliability_for_volume(cat.volume_dist, delta[e])
        if r_new >= 1.0:
            return Probe(e, 0.0, bumps=bump, note="support exhausted")
        try:
            cur = solve_p1_resolved(instance, delta, plan.tau2, backend, cache=p1_cache)
        except P1Infeasible:
            return Probe(e, 0.0, r_new, bumps=bump, note="phase 1 infeasible")
        if abs(cur.cost - plan.cost) > 1e-6:
            c_new = cache.cost(cur)
            return Probe(e, (c_new - base) / (r_new - rho[e]), r_new, c_new, bump)
    return Probe(e, 0.0, bumps=max_bumps, note="bump cap reached")


def _probe_detour(instance, plan, rho, z, cache, p1_cache, backend, max_bumps) -> Probe:
    ne = len(instance.categories)
    zone = instance.zones[z]
    base = cache.cost(plan)
    cur = plan
    tau2 = list(plan.tau2)
    for bump in range(1, max_bumps + 1):
        tau2[z] += max_detour_increment(cur, instance, zone.id, exact=True) + PUSH_DETOUR
        r_new = float(zone.detour_dist.cdf(tau2[z]))
        if r_new >= 1.0:
            return Probe(ne + z, 0.0, bumps=bump, note="support exhausted")
        try:
            cur = solve_p1_resolved(instance, plan.delta, tau2, backend, cache=p1_cache)
        except P1Infeasible:
            return Probe(ne + z, 0.0, r_new, bumps=bump, note="phase 1 infeasible")
        if abs(cur.cost - plan.cost) > 1e-6:
            c_new = cache.cost(cur)
            return Probe(ne + z, (c_new - base) / (r_new - rho[ne + z]), r_new, c_new, bump)
    return Probe(ne + z, 0.0, bumps=max_bumps, note="bump cap reached")


def sensitivity(instance: ServiceInstance, plan: Plan, rho: Sequence[float], cache: SolutionCache,
                p1_cache: dict | None = None, backend: str = DEFAULT_BACKEND,
                max_bumps: int = 10) -> tuple[np.ndarray, list[Probe]]:
    """Finite-difference gradient of the expected total cost at ``rho``.

    Each component is raised just past the point where the current plan
    stops fitting, and again while the phase-1 cost stays put (at most
    ``max_bumps`` times).  Components whose law runs out of support, or whose
    bump makes phase 1 infeasible, get a zero entry.
    """
    rho = np.asarray(rho, dtype=float)
    p1_cache = {} if p1_cache is None else p1_cache
    probes = []
    for e in range(len(instance.categories)):
        probes.append(_probe_volume(instance, plan, rho, e, cache, p1_cache, backend, max_bumps))
    for z in range(len(instance.zones)):
        probes.append(_probe_detour(instance, plan, rho, z, cache, p1_cache, backend, max_bumps))
    for p in probes:
        if p.note:
            log.info("component %d: gradient 0 (%s)", p.component, p.note)
    return np.array([p.gradient for p in probes]), probes


# -- step rule ---------------------------------------------------------------------------

class ZeroGradient(RuntimeError):
    """Raised by :func:`step` when every sensitivity is zero."""


def project(rho: np.ndarray) -> np.ndarray:
    return np.clip(rho, 0.0, RHO_MAX)


def step(state: OptimizerState, grad: np.ndarray, cost: float) -> np.ndarray:
    """Next reliabilities from the current point, its cost and its gradient."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient has non-finite entries")
    norm2 = float(grad @ grad)
    if norm2 == 0.0:
        raise ZeroGradient("gradient is zero")
    h = state.hyper
    if not state.adam:
        pi = h.lam_at(state.k) * (cost - h.gamma * state.best_cost) / norm2
        return project(state.rho - pi * grad)
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    state.adam_steps += 1
    t = state.adam_steps
    state.m = h.beta1 * state.m + (1.0 - h.beta1) * grad
    state.v = h.beta2 * state.v + (1.0 - h.beta2) * grad * grad
    m_hat = state.m / (1.0 - h.beta1 ** t)
    v_hat = state.v / (1.0 - h.beta2 ** t)
    return project(state.rho - h.alpha_at(state.k) * m_hat / (np.sqrt(v_hat) + h.eps))


# -- outer loop --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    scenarios: int = 150
    seed: int = 0
    max_iter: int = 50
    tol: float = 0.01
    stall_limit: int = 3
    backoff: float = 0.9
    max_bumps: int = 10
    node_limit: int | None = NODE_LIMIT
    backend: str = DEFAULT_BACKEND
    hyper: Hyperparameters = field(default_factory=Hyperparameters)


TRACE_HEADER = ("k", "rho", "C_f", "Q_bar", "C_total", "A", "wall_s")


@dataclass
class TraceRow:
    k: int
    rho: tuple[float, ...]
    fixed_cost: float
    expected_adhoc: float
    total: float
    adam: bool
    wall: float

    def as_row(self) -> list:
        return [self.k, " ".join(f"{r:.6f}" for r in self.rho), f"{self.fixed_cost:.6f}",
                f"{self.expected_adhoc:.6f}", f"{self.total:.6f}", int(self.adam),
                f"{self.wall:.3f}"]


@dataclass
class RunResult:
    rho: ReliabilityVector
    plan: Plan
    report: CostReport
    trace: list[TraceRow]
    reason: str
    state: OptimizerState
    cache: SolutionCache

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for row in self.trace:
                w.writerow(row.as_row())


def feasible_plan(instance: ServiceInstance, rho: np.ndarray, backoff: float = 0.9,
                  backend: str = DEFAULT_BACKEND, p1_cache: dict | None = None
                  ) -> tuple[np.ndarray, Plan]:
    """Solve phase 1, shrinking every reliability by ``backoff`` until it is feasible."""
    rho = project(np.asarray(rho, dtype=float))
    while True:
        try:
            plan = solve_p1(instance, ReliabilityVector.from_array(instance, rho), backend,
                            cache=p1_cache)
            return rho, plan
        except P1Infeasible:
            if not np.any(rho > 0):
                raise
            log.info("phase 1 infeasible at %s; backing off", np.round(rho, 4))
            rho = rho * backoff
            rho[rho < 1e-12] = 0.0


def run(instance: ServiceInstance, rho0: ReliabilityVector | Sequence[float],
        config: OptimizerConfig | None = None,
        scenarios: Sequence[Scenario] | None = None) -> RunResult:
    """Optimise the reliability vector from ``rho0``; returns the best point visited."""
    cfg = config or OptimizerConfig()
    if scenarios is None:
        scenarios = sample_scenarios(instance, cfg.scenarios, cfg.seed)
    rho = np.asarray(rho0.as_array() if isinstance(rho0, ReliabilityVector) else rho0, float)
    if rho.shape != (len(instance.categories) + len(instance.zones),):
        raise ValueError("starting point does not match the instance")
    cache = SolutionCache(instance, scenarios, cfg.backend, cfg.node_limit)
    p1_cache: dict = {}
    state = OptimizerState(rho=project(rho), hyper=cfg.hyper)
    trace: list[TraceRow] = []
    start = time.perf_counter()
    bests: list[float] = []
    adam_since = 0
    reason = "iteration limit"
    while state.k <= cfg.max_iter:
        state.rho, plan = feasible_plan(instance, state.rho, cfg.backoff, cfg.backend, p1_cache)
        rep = cache.report(plan)
        cost = rep.total
        state.record(state.rho, plan, cost)
        trace.append(TraceRow(state.k, tuple(state.rho), rep.fixed_cost, rep.expected_adhoc,
                              cost, state.adam, time.perf_counter() - start))
        log.info("k=%d C=%.4f best=%.4f adam=%s", state.k, cost, state.best_cost, state.adam)
        bests.append(state.best_cost)
        w = cfg.stall_limit
        # the stop rule only fires once Adam has had a full window of its own
        if (state.adam and state.k - adam_since >= w
                and bests[-1 - w] - bests[-1] <= cfg.tol * abs(bests[-1 - w])):
            reason = "relative change below tolerance"
            break
        if state.stall >= w and not state.adam:
            state.adam = True
            adam_since = state.k
        grad, _ = sensitivity(instance, plan, state.rho, cache, p1_cache, cfg.backend,
                              cfg.max_bumps)
        try:
            state.rho = step(state, grad, cost)
        except ZeroGradient:
            reason = "zero gradient"
            break
        state.k += 1
    best = ReliabilityVector.from_array(instance, state.best_rho)
    return RunResult(best, state.best_plan, cache.report(state.best_plan), trace, reason,
                     state, cache)


# -- baseline ----------------------------------------------------------------------------

def deterministic_plan(instance: ServiceInstance, point: str = "mean",
                       backend: str = DEFAULT_BACKEND) -> Plan:
    """Phase-1 plan at point estimates of every law (``"mean"`` or ``"median"``)."""
    if point not in ("mean", "median"):
        raise ValueError(f"unknown point estimate {point!r}")
    pick = (lambda d: d.mean()) if point == "mean" else (lambda d: d.median())
    delta = [max(0, int(round(pick(c.volume_dist)))) for c in instance.categories]
    tau2 = [max(0.0, float(pick(z.detour_dist))) for z in instance.zones]
    return solve_p1_resolved(instance, delta, tau2, backend)


__all__ = [
    "Hyperparameters", "OptimizerConfig", "OptimizerState", "Probe", "RunResult",
    "SolutionCache", "TraceRow", "ZeroGradient", "deterministic_plan", "feasible_plan",
    "max_demand_increment", "max_detour_increment", "project",
    "run", "sensitivity", "step", "vehicle_demand_increment",
]
