"""Self-checks behind ``flexbus check``.

Each suite returns a :class:`SuiteResult`; a suite that does not apply to
the instance is skipped with a reason instead of failing.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import bundled, instance_from_dict, scenarios_from_dict
from .detour import InvalidCurveError, max_cut, tangent_cuts, zonal_detour
from .domain import ServiceInstance, build_converting_matrix, od_load, od_vector
from .oracle import EnumerationTooLarge, check_assumptions, check_equivalence, random_micro_instance
from .optimizer import max_demand_increment, max_detour_increment
from .phase1 import (P1Infeasible, ReliabilityVector, plan_from_deployment, solve_p1,
                     solve_p1_resolved)
from .phase2 import solve_p2

COST_TOL = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    skipped: str | None = None
    failures: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    wall: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _timed(fn):
    def wrapper(*args, **kw):
        t = time.perf_counter()
        res = fn(*args, **kw)
        res.wall = time.perf_counter() - t
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _appendix_variant(max_detour_a: float, cap: int):
    doc = json.loads(bundled("appendix_a").read_text())
    for z in doc["zones"]:
        if z["id"] == "A":
            z["max_detour"] = max_detour_a
    doc["fleet"]["capacity"] = cap
    inst = instance_from_dict(doc)
    return inst, scenarios_from_dict(inst, doc["scenarios"])[0]


@_timed
def appendix_fixture() -> SuiteResult:
    """Four-request fixture on one ABC route: costs 10 and 13, served flags 1,1,0,1."""
    fails = []
    details = {}
    for label, tA, cap, want_cost, want_w in (("generous", 8.0, 7, 10.0, (1, 1, 1, 1)),
                                              ("tight", 4.0, 6, 13.0, (1, 1, 0, 1))):
        inst, sc = _appendix_variant(tA, cap)
        plan = plan_from_deployment(inst, {"ABC": 1})
        a = solve_p2(inst, plan, sc, method="search")
        w = tuple(int(v is not None) for v in a.vehicle)
        total = plan.cost + a.cost
        details[label] = {"C_total": total, "served": list(w)}
        if abs(total - want_cost) > COST_TOL:
            fails.append(f"{label}: total cost {total} != {want_cost}")
        if w != want_w:
            fails.append(f"{label}: served flags {w} != {want_w}")
    # constraint construction on the same requests
    inst, sc = _appendix_variant(8.0, 7)
    dA = zonal_detour(sc.matrices["A"], [1, 1, 1, 0])
    B = build_converting_matrix(inst.route("ABC"), inst.od_set)
    load = B.load(od_vector(od_load([1, 1, 1, 1], sc.requests), inst.od_set))
    details.update(zone_a_detour=dA, zone_a_load=float(load[0]))
    if abs(dA - 4.2) > 1e-12:
        fails.append(f"zone A detour {dA} != 4.2")
    if load[0] != 7:
        fails.append(f"zone A load {load[0]} != 7")
    return SuiteResult("appendix_fixture", not fails, failures=fails, details=details)


@_timed
def tangent_cut_suite(instance: ServiceInstance) -> SuiteResult:
    """Chord cuts reproduce every zone curve at the integers ``0..2cap``."""
    cap = instance.fleet.capacity
    fails = []
    for z in instance.zones:
        try:
            cuts = tangent_cuts(z.curve, cap)
        except InvalidCurveError as exc:
            fails.append(f"zone {z.id}: {exc}")
            continue
        worst = max(abs(max_cut(cuts, y) - z.curve(y)) for y in range(2 * cap + 1))
        if worst > 1e-12:
            fails.append(f"zone {z.id}: cut error {worst:.3g}")
    return SuiteResult("tangent_cuts", not fails, failures=fails)


@_timed
def assumption_suite(instance: ServiceInstance) -> SuiteResult:
    issues = check_assumptions(instance)
    return SuiteResult("assumptions", not issues, failures=issues)


@_timed
def micro_equivalence(seeds: int = 20, seed: int = 0, samples: int = 5) -> SuiteResult:
    """Sampled two-phase solutions are feasible and the exact optimum is reachable."""
    fails = []
    rows = []
    for k in range(seeds):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), k])))
        inst, scs = random_micro_instance(rng)
        rep = check_equivalence(inst, scs, samples=samples, seed=k)
        rows.append({"seed": k, "p0": str(rep.p0.deployment), "p0_cost": rep.p0.fixed_cost,
                     "p1_cost": rep.p1_cost, "sampled": rep.sampled})
        fails.extend(f"micro {k}: {m}" for m in rep.feasibility_violations)
        if not rep.cost_matches:
            fails.append(f"micro {k}: constructed cost {rep.p1_cost} != {rep.p0.fixed_cost} "
                         f"({'; '.join(rep.assumption_issues)})")
    return SuiteResult("micro_equivalence", not fails, failures=fails, details={"rows": rows})


@_timed
def instance_equivalence(instance: ServiceInstance, scenarios, seed: int = 0) -> SuiteResult:
    issues = check_assumptions(instance)
    if issues:
        return SuiteResult("instance_equivalence", True, skipped="; ".join(issues))
    try:
        rep = check_equivalence(instance, scenarios, seed=seed)
    except EnumerationTooLarge as exc:
        return SuiteResult("instance_equivalence", True, skipped=str(exc))
    fails = list(rep.feasibility_violations)
    if not rep.cost_matches:
        fails.append(f"constructed cost {rep.p1_cost} != {rep.p0.fixed_cost}")
    return SuiteResult("instance_equivalence", not fails, failures=fails,
                       details={"p0": str(rep.p0.deployment), "p0_cost": rep.p0.fixed_cost})


def _invariance_failures(instance: ServiceInstance, plan) -> list[str]:
    fails = []
    for e, c in enumerate(instance.categories):
        eps = max_demand_increment(plan, instance, c.id)
        for d in range(eps + 1):
            delta = list(plan.delta)
            delta[e] += d
            q = solve_p1_resolved(instance, delta, plan.tau2)
            if abs(q.cost - plan.cost) > COST_TOL:
                fails.append(f"volume {c.id} +{d} (eps {eps}): {plan.cost} -> {q.cost}")
    for zi, z in enumerate(instance.zone_ids):
        eps = max_detour_increment(plan, instance, z)
        if not math.isfinite(eps):
            continue
        for dt in (0.0, eps / 2, eps):
            tau = list(plan.tau2)
            tau[zi] += dt
            try:
                q = solve_p1_resolved(instance, plan.delta, tau)
            except P1Infeasible as exc:
                fails.append(f"detour {z} +{dt:.6g} (eps {eps:.6g}): {exc}")
                continue
            if abs(q.cost - plan.cost) > COST_TOL:
                fails.append(f"detour {z} +{dt:.6g} (eps {eps:.6g}): {plan.cost} -> {q.cost}")
    return fails


@_timed
def increment_invariance(instance: ServiceInstance | None = None, plans: int = 20,
                         seed: int = 0) -> SuiteResult:
    """Phase-1 cost is unchanged within the demand and detour increment bounds.

    Without an instance, each plan comes from a fresh random micro instance.
    """
    fails = []
    done = tried = 0
    while done < plans and tried < 20 * plans:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 11, tried])))
        tried += 1
        inst = instance if instance is not None else random_micro_instance(rng)[0]
        dim = len(inst.categories) + len(inst.zones)
        rho = ReliabilityVector.from_array(inst, rng.uniform(0.2, 0.9, dim))
        try:
            plan = solve_p1(inst, rho)
        except P1Infeasible:
            continue
        if not plan.used:
            continue
        done += 1
        fails.extend(f"plan {done}: {m}" for m in _invariance_failures(inst, plan))
    if done == 0:
        return SuiteResult("increment_invariance", True, skipped="no feasible plan sampled")
    return SuiteResult("increment_invariance", not fails, failures=fails,
                       details={"plans": done})
