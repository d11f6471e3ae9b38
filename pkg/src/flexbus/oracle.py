"""Ground truth at desk scale.

* ``solve_p0_exact`` enumerates every canonical fleet deployment (a multiset
  of routes), solves the assignment problem exactly in every scenario and
  returns the cheapest expected total cost.
* ``rho_grid`` evaluates phase 1 plus phase 2 on a grid of reliabilities.
* ``check_equivalence`` tests that two-phase solutions are feasible for the
  two-stage problem and that the two-stage optimum is reachable from phase 1
  with constructed reliabilities.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import instance_from_dict
from .domain import ServiceInstance
from .phase1 import (DEFAULT_BACKEND, P1Infeasible, Plan, ReliabilityVector, plan_from_deployment,
                     solve_p1)
from .phase2 import Assignment, CostReport, brute_force_p2, check_assignment, evaluate, solve_p2
from .stochastic import (Scenario, demand_quantile, reliability_for_volume, sample_scenarios)

ENUMERATION_LIMIT = 100_000


class EnumerationTooLarge(ValueError):
    """The exact enumeration would exceed its configured size guard."""


@dataclass(frozen=True, order=True)
class Deployment:
    """Route counts ``((route id, k), ...)`` sorted by route id, zero counts dropped."""

    counts: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        clean = tuple(sorted((r, int(k)) for r, k in self.counts if int(k) > 0))
        if any(k < 0 for _, k in self.counts):
            raise ValueError("negative vehicle count")
        object.__setattr__(self, "counts", clean)

    @property
    def total(self) -> int:
        return sum(k for _, k in self.counts)

    def cost(self, instance: ServiceInstance) -> float:
        return sum(k * instance.route_cost(instance.route(r)) for r, k in self.counts)

    def to_plan(self, instance: ServiceInstance) -> Plan:
        return plan_from_deployment(instance, self.counts)

    @classmethod
    def from_plan(cls, plan: Plan) -> "Deployment":
        return cls(plan.deployment())

    def __str__(self) -> str:
        return "+".join(f"{k}x{r}" for r, k in self.counts) or "none"


def count_deployments(n_routes: int, fleet: int) -> int:
    """Multisets of at most ``fleet`` vehicles over ``n_routes`` routes."""
    return math.comb(n_routes + fleet, fleet)


def enumerate_deployments(instance: ServiceInstance, limit: int = ENUMERATION_LIMIT
                          ) -> Iterable[Deployment]:
    """All canonical deployments, fewest vehicles first."""
    ids = sorted(r.id for r in instance.routes)
    size = count_deployments(len(ids), instance.fleet.size)
    if size > limit:
        raise EnumerationTooLarge(f"{size} deployments exceed the limit {limit}")
    for total in range(instance.fleet.size + 1):
        for combo in itertools.combinations_with_replacement(ids, total):
            counts: dict[str, int] = {}
            for r in combo:
                counts[r] = counts.get(r, 0) + 1
            yield Deployment(tuple(counts.items()))


@dataclass
class P0Result:
    deployment: Deployment
    expected_cost: float
    fixed_cost: float
    expected_adhoc: float
    table: list[tuple[Deployment, float]] = field(default_factory=list)


def _check_probabilities(scenarios: Sequence[Scenario]) -> None:
    tot = sum(s.probability for s in scenarios)
    if scenarios and abs(tot - 1.0) > 1e-9:
        raise ValueError(f"scenario probabilities sum to {tot}")


def solve_p0_exact(instance: ServiceInstance, scenarios: Sequence[Scenario],
                   limit: int = ENUMERATION_LIMIT) -> P0Result:
    """Exact two-stage optimum by canonical deployment enumeration.

    Ties keep the first deployment in enumeration order (fewest vehicles).
    """
    _check_probabilities(scenarios)
    cache: dict = {}
    best: P0Result | None = None
    table = []
    for dep in enumerate_deployments(instance, limit):
        plan = dep.to_plan(instance)
        fixed = plan.cost
        if best is not None and fixed >= best.expected_cost + 1e-9:
            table.append((dep, math.inf))
            continue
        q = sum(s.probability * solve_p2(instance, plan, s, cache=cache, node_limit=None).cost
                for s in scenarios)
        table.append((dep, fixed + q))
        if best is None or fixed + q < best.expected_cost - 1e-9:
            best = P0Result(dep, fixed + q, fixed, q)
    assert best is not None
    best.table = table
    return best


def brute_force_p0(instance: ServiceInstance, scenarios: Sequence[Scenario],
                   limit: int = 2_000) -> float:
    """Joint enumeration over labelled route choices and every assignment."""
    _check_probabilities(scenarios)
    options = [None] + [r.id for r in instance.routes]
    if len(options) ** instance.fleet.size > limit:
        raise EnumerationTooLarge("labelled enumeration too large")
    best = math.inf
    for routes in itertools.product(options, repeat=instance.fleet.size):
        cost = sum(instance.route_cost(instance.route(r)) for r in routes if r)
        plan = Plan(tuple(routes), {}, cost)
        total = cost + sum(s.probability * brute_force_p2(instance, plan, s) for s in scenarios)
        best = min(best, total)
    return best


def check_p0(instance: ServiceInstance, plan: Plan, scenario: Scenario,
             assignment: Assignment) -> list[str]:
    """Two-stage feasibility of ``(X, W)`` for one scenario."""
    bad = []
    if len(plan.routes) != instance.fleet.size:
        bad.append("route list does not cover the fleet")
    known = {r.id for r in instance.routes}
    for v, r in enumerate(plan.routes):
        if r is not None and r not in known:
            bad.append(f"vehicle {v} on unknown route {r}")
    if bad:
        return bad
    for i, v in enumerate(assignment.vehicle):
        if v is not None and not 0 <= v < len(plan.routes):
            bad.append(f"request {i} on missing vehicle {v}")
        elif v is not None and plan.routes[v] is None:
            bad.append(f"request {i} on vehicle {v} without a route")
    if bad:
        return bad
    return check_assignment(instance, plan, scenario, assignment)


# -- reliability grids ------------------------------------------------------------

def relevant_components(instance: ServiceInstance) -> list[int]:
    """Indices into the flat reliability vector that can change a plan.

    Every category counts; a zone counts only when some category starts or
    ends in it.
    """
    ne = len(instance.categories)
    touched = {z for c in instance.categories for z in c.od}
    return list(range(ne)) + [ne + k for k, z in enumerate(instance.zones) if z.id in touched]


def grid_values(step: float) -> np.ndarray:
    if not 0 < step <= 1:
        raise ValueError("grid step must lie in (0, 1]")
    n = int(math.floor(1.0 / step + 1e-9))
    vals = np.round(np.arange(n) * step, 12)
    return vals[vals < 1.0]


@dataclass
class GridRow:
    rho: tuple[float, ...]
    fixed_cost: float
    expected_adhoc: float
    total: float
    deployment: Deployment | None

    @property
    def feasible(self) -> bool:
        return self.deployment is not None


@dataclass
class GridResult:
    rows: list[GridRow]
    components: list[int]
    reports: dict[Deployment, CostReport]

    def argmin(self, tol: float = 1e-9) -> list[GridRow]:
        best = min(r.total for r in self.rows)
        return [r for r in self.rows if r.total <= best + tol]

    def tiers(self) -> list[tuple[Deployment, float]]:
        """Distinct feasible deployments with their costs, cheapest first."""
        seen: dict[Deployment, float] = {}
        for r in self.rows:
            if r.feasible:
                seen[r.deployment] = r.total
        return sorted(seen.items(), key=lambda t: (t[1], t[0]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rho", "C_f", "Q_bar", "C_total", "deployment"])
            for r in self.rows:
                w.writerow([" ".join(f"{x:g}" for x in r.rho), r.fixed_cost, r.expected_adhoc,
                            r.total, str(r.deployment) if r.deployment else "infeasible"])


class GridEvaluator:
    """Phase 1 plus phase 2 at arbitrary reliabilities, reusing every solve it can."""

    def __init__(self, instance: ServiceInstance, scenarios: Sequence[Scenario],
                 backend: str = DEFAULT_BACKEND, node_limit: int | None = 2000):
        _check_probabilities(scenarios)
        self.instance = instance
        self.scenarios = list(scenarios)
        self.backend = backend
        self.node_limit = node_limit
        self.p1_cache: dict = {}
        self.p2_cache: dict = {}
        self.reports: dict[Deployment, CostReport] = {}

    def report(self, plan: Plan) -> CostReport:
        dep = Deployment.from_plan(plan)
        if dep not in self.reports:
            canon = dep.to_plan(self.instance)
            self.reports[dep] = evaluate(self.instance, canon, self.scenarios, self.backend,
                                         cache=self.p2_cache, node_limit=self.node_limit)
        return self.reports[dep]

    def row(self, rho: Sequence[float]) -> GridRow:
        vec = ReliabilityVector.from_array(self.instance, rho)
        try:
            plan = solve_p1(self.instance, vec, self.backend, cache=self.p1_cache)
        except P1Infeasible:
            return GridRow(tuple(rho), math.inf, math.inf, math.inf, None)
        rep = self.report(plan)
        return GridRow(tuple(float(x) for x in rho), rep.fixed_cost, rep.expected_adhoc,
                       rep.total, Deployment.from_plan(plan))


def rho_grid(instance: ServiceInstance, step: float, scenarios: Sequence[Scenario],
             mode: str = "full", fill: float = 0.0, max_dim: int = 3,
             evaluator: GridEvaluator | None = None) -> GridResult:
    """Full-factorial grid over the relevant reliability components.

    ``mode="shared"`` instead ties all volume reliabilities to one value and
    all relevant detour reliabilities to another (a two-dimensional grid).
    Components that cannot affect the plan are held at ``fill``.
    """
    ev = evaluator or GridEvaluator(instance, scenarios)
    comps = relevant_components(instance)
    ne = len(instance.categories)
    dim = len(instance.categories) + len(instance.zones)
    vals = grid_values(step)
    rows = []
    if mode == "full":
        if len(comps) > max_dim:
            raise ValueError(f"{len(comps)} grid dimensions exceed the guard {max_dim}")
        for point in itertools.product(vals, repeat=len(comps)):
            rho = np.full(dim, fill)
            rho[comps] = point
            rows.append(ev.row(rho))
    elif mode == "shared":
        vol = [c for c in comps if c < ne]
        det = [c for c in comps if c >= ne]
        for a, b in itertools.product(vals, vals if det else [fill]):
            rho = np.full(dim, fill)
            rho[vol] = a
            rho[det] = b
            rows.append(ev.row(rho))
    else:
        raise ValueError(f"unknown grid mode {mode!r}")
    return GridResult(rows, comps, ev.reports)


def rho_scan(instance: ServiceInstance, values: Sequence[float], scenarios: Sequence[Scenario],
             volume: bool = True, other: float = 0.0,
             evaluator: GridEvaluator | None = None) -> GridResult:
    """One-dimensional scan: every volume (or every detour) reliability set to each value."""
    ev = evaluator or GridEvaluator(instance, scenarios)
    ne = len(instance.categories)
    dim = ne + len(instance.zones)
    rows = []
    for x in values:
        rho = np.full(dim, float(other))
        if volume:
            rho[:ne] = x
        else:
            rho[ne:] = x
        rows.append(ev.row(rho))
    return GridResult(rows, list(range(ne)) if volume else list(range(ne, dim)), ev.reports)


def local_minima(values: Sequence[float]) -> int:
    """Number of strict local minima of a sequence after merging equal neighbours."""
    v = [x for k, x in enumerate(values) if k == 0 or x != values[k - 1]]
    count = 0
    for k in range(len(v)):
        left = k == 0 or v[k - 1] > v[k]
        right = k == len(v) - 1 or v[k + 1] > v[k]
        if left and right and 0 < k < len(v) - 1:
            count += 1
    return count


def sign_changes(values: Sequence[float]) -> int:
    """Sign changes in the non-zero discrete differences of a sequence."""
    d = np.sign(np.diff(np.asarray(values, dtype=float)))
    d = d[d != 0]
    return int(np.sum(d[1:] != d[:-1])) if d.size > 1 else 0


# -- equivalence -------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    assumption_issues: list[str]
    sampled: int
    feasibility_violations: list[str]
    p0: P0Result | None
    constructed_rho: tuple[float, ...] | None
    p1_cost: float | None

    @property
    def feasible_ok(self) -> bool:
        return not self.feasibility_violations

    @property
    def cost_matches(self) -> bool:
        if self.p0 is None or self.p1_cost is None:
            return False
        return abs(self.p1_cost - self.p0.fixed_cost) <= 1e-6


def check_assumptions(instance: ServiceInstance) -> list[str]:
    """Conditions under which a two-stage optimum is reachable from phase 1."""
    issues = []
    for od in dict.fromkeys(c.od for c in instance.categories):
        direct = [r for r in instance.routes
                  if (r.zone_sequence[0], r.zone_sequence[-1]) == od]
        if len(direct) != 1:
            issues.append(f"OD {od}: {len(direct)} direct routes")
        if not any(c.passengers == 1 for c in instance.categories if c.od == od):
            issues.append(f"OD {od}: no single-passenger category")
    for z in instance.zones:
        if 2.0 * z.curve(1) > z.max_detour:
            issues.append(f"zone {z.id}: one request does not fit the detour budget")
    return issues


def constructed_reliability(instance: ServiceInstance, dep: Deployment
                            ) -> tuple[ReliabilityVector, list[str]]:
    """Volumes equal to the deployment's seats, zero detour reliabilities."""
    issues = []
    cap = instance.fleet.capacity
    vol = [0.0] * len(instance.categories)
    for rid, k in dep.counts:
        r = instance.route(rid)
        od = (r.zone_sequence[0], r.zone_sequence[-1])
        idx = [j for j, c in enumerate(instance.categories) if c.od == od and c.passengers == 1]
        if not idx:
            issues.append(f"route {rid}: no single-passenger category for {od}")
            continue
        c = instance.categories[idx[0]]
        target = k * cap
        rho = reliability_for_volume(c.volume_dist, target)
        if rho >= 1.0 or demand_quantile(c.volume_dist, rho) != target:
            issues.append(f"category {c.id}: volume {target} is not a reachable quantile")
            continue
        vol[idx[0]] = rho
    return ReliabilityVector(tuple(vol), (0.0,) * len(instance.zones)), issues


def check_equivalence(instance: ServiceInstance, scenarios: Sequence[Scenario],
                      samples: int = 5, seed: int = 0,
                      limit: int = ENUMERATION_LIMIT) -> EquivalenceReport:
    """Feasibility of sampled two-phase solutions and reachability of the exact optimum."""
    issues = check_assumptions(instance)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    violations = []
    dim = len(instance.categories) + len(instance.zones)
    done = 0
    cache: dict = {}
    for _ in range(10 * samples):
        if done >= samples:
            break
        # shrink draws toward zero so that small fleets still yield feasible plans
        rho = ReliabilityVector.from_array(instance, rng.uniform(0.0, 0.95, size=dim) * rng.random())
        try:
            plan = solve_p1(instance, rho)
        except P1Infeasible:
            continue
        done += 1
        for s in scenarios:
            a = solve_p2(instance, plan, s, cache=cache)
            violations.extend(f"rho={rho.as_array().round(3).tolist()}: {m}"
                              for m in check_p0(instance, plan, s, a))
    p0 = solve_p0_exact(instance, scenarios, limit)
    vec, more = constructed_reliability(instance, p0.deployment)
    issues.extend(more)
    try:
        p1_cost = solve_p1(instance, vec).cost
    except P1Infeasible as exc:
        issues.append(f"constructed reliabilities are infeasible: {exc}")
        p1_cost = None
    return EquivalenceReport(issues, done, violations, p0, tuple(vec.as_array()), p1_cost)


# -- random micro instances ------------------------------------------------------------

def random_micro_instance(rng: np.random.Generator, zones: int | None = None,
                          scenarios: int | None = None) -> tuple[ServiceInstance, list[Scenario]]:
    """A small instance on a path of zones with direct routes and additive costs.

    Every served OD gets a single-passenger category and possibly a
    two-passenger one; each zone admits at least one request.
    """
    nz = int(zones or rng.integers(2, 4))
    ids = "ABC"[:nz]
    zdocs = []
    for z in ids:
        a = float(rng.uniform(0.3, 0.9))
        zdocs.append({"id": z, "max_detour": float(np.round(rng.uniform(2 * a + 0.5, 6.0), 2)),
                      "curve": {"form": "linear", "a": a, "b": 0.02},
                      "detour_dist": {"kind": "tn", "mu": float(rng.uniform(0.5, 1.5)),
                                      "var": float(rng.uniform(0.3, 1.0))}})
    links = [{"from": a, "to": b, "cost": float(rng.integers(2, 9))} for a, b in zip(ids, ids[1:])]
    pairs = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]
    chosen = [pairs[k] for k in sorted(rng.choice(len(pairs), size=min(2, len(pairs)),
                                                 replace=False))]
    cats = []
    for o, d in chosen:
        cats.append({"origin": o, "dest": d, "passengers": 1,
                     "volume": {"kind": "tn", "mu": float(rng.uniform(1.0, 6.0)),
                                "var": float(rng.uniform(0.5, 3.0))}})
        if rng.random() < 0.5:
            cats.append({"origin": o, "dest": d, "passengers": 2,
                         "volume": {"kind": "tn", "mu": float(rng.uniform(0.5, 2.5)),
                                    "var": float(rng.uniform(0.3, 1.5))}})
    doc = {"schema_version": 1, "name": "micro", "zones": zdocs, "links": links,
           "routes": "auto", "categories": cats,
           "fleet": {"size": int(rng.integers(1, 5)), "capacity": int(rng.integers(2, 5))},
           "adhoc_ratio": float(np.round(rng.uniform(0.6, 1.5), 2)),
           "detour_modes": ["zone"], "reduction_rule": "A"}
    inst = instance_from_dict(doc)
    n = int(scenarios or rng.integers(1, 4))
    return inst, sample_scenarios(inst, n, seed=int(rng.integers(0, 2 ** 31)))


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
