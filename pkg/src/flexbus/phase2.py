"""Phase-2 request assignment against a fixed plan, and Monte Carlo cost evaluation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import milp
from ._p2search import search_block
from .detour import zonal_detour
from .domain import ServiceInstance, ServiceRequest
from .phase1 import DEFAULT_BACKEND, Plan
from .stochastic import Scenario

TIE_WEIGHT = 1e-7
NODE_LIMIT = 2000


@dataclass
class Assignment:
    """``vehicle[i]`` is the vehicle serving request ``i`` of the scenario, or ``None``."""

    vehicle: tuple[int | None, ...]
    cost: float
    scenario_id: int = 0
    proven: bool = True

    @property
    def served(self) -> list[int]:
        return [i for i, v in enumerate(self.vehicle) if v is not None]

    @property
    def unserved(self) -> list[int]:
        return [i for i, v in enumerate(self.vehicle) if v is None]

    def flags(self, v: int) -> np.ndarray:
        return np.array([1 if u == v else 0 for u in self.vehicle])


@dataclass
class CostReport:
    fixed_cost: float
    expected_adhoc: float
    total: float
    scenario_costs: list[float]
    service_rate: float
    occupancy: float
    total_detour: float
    max_detour_per_vehicle: float
    detour_per_zone_visit: float
    zone_mean_detour: dict[str, float] = field(default_factory=dict)
    vehicles_used: int = 0
    unproven: int = 0

    def to_dict(self) -> dict:
        return {
            "C_f": self.fixed_cost, "Q_bar": self.expected_adhoc, "C_total": self.total,
            "service_rate": self.service_rate, "occupancy": self.occupancy,
            "total_detour": self.total_detour,
            "avg_max_detour": self.max_detour_per_vehicle,
            "detour_per_zone_visit": self.detour_per_zone_visit,
            "zone_mean_detour": self.zone_mean_detour,
            "vehicles_used": self.vehicles_used,
            "unproven_scenarios": self.unproven,
            "scenario_costs": self.scenario_costs,
        }


def candidates(instance: ServiceInstance, plan: Plan, requests: Sequence[ServiceRequest]
               ) -> dict[int, list[int]]:
    """Vehicles whose route traverses each request's OD, keyed by request index."""
    out = {}
    for i, r in enumerate(requests):
        out[i] = [v for v in plan.used if instance.route(plan.routes[v]).traverses(r.od)]
    return out


def _components(cands: dict[int, list[int]]) -> list[tuple[list[int], list[int]]]:
    parent: dict = {}

    def find(a):
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, vs in cands.items():
        find(("r", i))
        for v in vs:
            ra, rb = find(("r", i)), find(("v", v))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for i, vs in cands.items():
        if vs:
            groups.setdefault(find(("r", i)), ([], set()))[0].append(i)
            groups[find(("r", i))][1].update(vs)
    return [(sorted(r), sorted(v)) for r, v in (groups[k] for k in sorted(groups))]


@dataclass
class P2Model:
    model: milp.Model
    w: dict[tuple[int, int], int]
    requests: list[int]
    vehicles: list[int]


def zone_count_bound(T: np.ndarray, limit: float, tol: float = 1e-9) -> int:
    """Largest ``k`` such that some ``k`` requests could fit the detour ``limit``.

    Any ``k``-subset costs at least the sum of the ``k`` smallest values of
    ``tau_d + (sum of the k-1 most negative reductions in row d)``.
    """
    n = T.shape[0]
    if n == 0:
        return 0
    off = T - np.diag(np.diag(T))
    srt = np.sort(off, axis=1)
    diag = np.diag(T)
    best = 0
    for k in range(1, n + 1):
        g = diag + srt[:, :k - 1].sum(axis=1)
        if np.sort(g)[:k].sum() <= limit + tol:
            best = k
        else:
            break
    return best


def build_p2(instance: ServiceInstance, plan: Plan, scenario: Scenario,
             requests: Sequence[int] | None = None, vehicles: Sequence[int] | None = None,
             tie_break: bool = True, formulation: str = "compact") -> P2Model:
    """Assignment MILP for a scenario, optionally restricted to a request/vehicle subset.

    ``formulation="product"`` linearises every reduction term with its own
    product variable; ``"compact"`` uses one bounded variable per request and
    zone (``u_d = w_d * sum_b tau_db w_b``).  Both are exact at binary points.
    """
    if formulation not in ("compact", "product"):
        raise ValueError(f"unknown formulation {formulation!r}")
    reqs = scenario.requests
    idx = list(range(len(reqs))) if requests is None else list(requests)
    vehs = plan.used if vehicles is None else list(vehicles)
    cap = instance.fleet.capacity
    m = milp.Model("p2")
    w: dict[tuple[int, int], int] = {}
    routes = {v: instance.route(plan.routes[v]) for v in vehs}
    for i in idx:
        for pos, v in enumerate(vehs):
            if routes[v].traverses(reqs[i].od):
                w[(i, v)] = m.add_var(f"w[{reqs[i].id},{v}]", milp.BINARY)
    obj = {}
    const = 0.0
    for i in idx:
        const += reqs[i].adhoc_cost
        for v in vehs:
            if (i, v) in w:
                obj[w[(i, v)]] = -reqs[i].adhoc_cost
    if tie_break:
        for pos, v in enumerate(vehs):
            for i in idx:
                if (i, v) in w:
                    obj[w[(i, v)]] += TIE_WEIGHT * (pos + 1)
    m.set_objective(obj, const)
    for i in idx:
        cols = [w[(i, v)] for v in vehs if (i, v) in w]
        if len(cols) > 1:
            m.add_constr({c: 1.0 for c in cols}, "<=", 1.0, f"once[{reqs[i].id}]")

    # identical vehicles on one route: vehicle j may serve request d only if
    # vehicle j-1 already serves some earlier request
    by_route: dict[str, list[int]] = {}
    for v in vehs:
        by_route.setdefault(plan.routes[v], []).append(v)
    for group in by_route.values():
        mine = [i for i in idx if (i, group[0]) in w]
        for j in range(1, len(group)):
            prev, cur = group[j - 1], group[j]
            for k, i in enumerate(mine):
                if k < j:
                    m.add_constr({w[(i, cur)]: 1.0}, "=", 0.0, f"sym0[{i},{cur}]")
                else:
                    coeffs = {w[(i, cur)]: 1.0}
                    for i2 in mine[:k]:
                        coeffs[w[(i2, prev)]] = coeffs.get(w[(i2, prev)], 0.0) - 1.0
                    m.add_constr(coeffs, "<=", 0.0, f"sym[{i},{cur}]")

    for v in vehs:
        route = routes[v]
        mine = [i for i in idx if (i, v) in w]
        if not mine:
            continue
        # onboard load at each non-terminal position
        for pos in range(route.m - 1):
            row = {}
            for i in mine:
                a, b = route.segment(reqs[i].od)
                if a <= pos < b:
                    row[w[(i, v)]] = float(reqs[i].passengers)
            if row and sum(row.values()) > cap:
                m.add_constr(row, "<=", float(cap), f"cap[{v},{pos}]")
        zone_expr: dict[str, dict[int, float]] = {}
        for z in dict.fromkeys(route.zone_sequence):
            T = scenario.matrices[z]
            local = [i for i in mine if z in (reqs[i].origin, reqs[i].dest)]
            if not local:
                continue
            pos_of = {i: T.index(reqs[i].id) for i in local}
            sub = T.matrix[np.ix_([pos_of[i] for i in local], [pos_of[i] for i in local])]
            expr: dict[int, float] = {}
            for i in local:
                expr[w[(i, v)]] = expr.get(w[(i, v)], 0.0) + T.matrix[pos_of[i], pos_of[i]]
            if formulation == "product":
                for i, k in itertools.combinations(local, 2):
                    red = T.matrix[pos_of[i], pos_of[k]]
                    if red != 0.0:
                        zprod = milp.linearize_product(m, w[(i, v)], w[(k, v)],
                                                       f"p[{reqs[i].id},{reqs[k].id},{v},{z}]")
                        expr[zprod] = 2.0 * red
            else:
                for a, i in enumerate(local):
                    row = {w[(k, v)]: sub[a, b] for b, k in enumerate(local)
                           if b != a and sub[a, b] != 0.0}
                    if not row:
                        continue
                    low = float(sum(row.values()))
                    u = m.add_var(f"u[{reqs[i].id},{v},{z}]", milp.CONTINUOUS, low, 0.0)
                    m.add_constr({u: 1.0, w[(i, v)]: -low}, ">=", 0.0, f"ulo[{i},{v},{z}]")
                    m.add_constr({u: 1.0, **{k: -c for k, c in row.items()}}, ">=", 0.0,
                                 f"urow[{i},{v},{z}]")
                    expr[u] = 1.0
            if "zone" in instance.detour_modes:
                kmax = zone_count_bound(sub, instance.zone(z).max_detour)
                if kmax < len(local):
                    m.add_constr({w[(i, v)]: 1.0 for i in local}, "<=", float(kmax),
                                 f"count[{v},{z}]")
            zone_expr[z] = expr
            if "zone" in instance.detour_modes:
                m.add_constr(expr, "<=", instance.zone(z).max_detour, f"det[{v},{z}]")
        if "trip" in instance.detour_modes and zone_expr:
            m.add_constr(_sum_exprs(zone_expr.values()), "<=", instance.trip_detour_limit,
                         f"trip[{v}]")
        if "od" in instance.detour_modes:
            for od in instance.od_set:
                lim = instance.od_limit(od)
                if math.isfinite(lim) and route.traverses(od):
                    parts = [zone_expr[z] for z in dict.fromkeys(route.zones_between(od))
                             if z in zone_expr]
                    if parts:
                        m.add_constr(_sum_exprs(parts), "<=", lim, f"od[{v},{od[0]}{od[1]}]")
    return P2Model(m, w, idx, list(vehs))


def _sum_exprs(exprs) -> dict[int, float]:
    out: dict[int, float] = {}
    for e in exprs:
        for k, a in e.items():
            out[k] = out.get(k, 0.0) + a
    return out


def _solve_block(instance, plan, scenario, reqs, vehs, backend, formulation="compact",
                 method="search", node_limit=NODE_LIMIT, time_limit=None):
    """``(chosen, proven)`` for one block."""
    if method == "search":
        return search_block(instance, plan, scenario, reqs, vehs, node_limit)
    if method != "milp":
        raise ValueError(f"unknown phase-2 method {method!r}")
    pm = build_p2(instance, plan, scenario, reqs, vehs, formulation=formulation)
    sol = milp.solve(pm.model, backend=backend, time_limit=time_limit)
    if sol.values is None:
        raise RuntimeError(f"phase-2 solve ended with status {sol.status}")
    chosen = {i: v for (i, v), k in pm.w.items() if sol[k] > 0.5}
    return chosen, sol.is_optimal


def solve_p2(instance: ServiceInstance, plan: Plan, scenario: Scenario,
             backend: str = DEFAULT_BACKEND, decompose: bool = True,
             cache: dict | None = None, method: str = "search",
             node_limit: int | None = NODE_LIMIT, time_limit: float | None = None,
             formulation: str = "compact") -> Assignment:
    """Optimal assignment of one scenario's requests to the plan's vehicles.

    ``method="search"`` runs an exact depth-first search per block, stopping
    after ``node_limit`` nodes (``None`` for no limit).  ``method="milp"``
    solves the MILP with ``backend`` instead, within ``time_limit`` seconds.
    ``Assignment.proven`` is False when any block stopped at its limit.
    """
    reqs = scenario.requests
    vehicle: list[int | None] = [None] * len(reqs)
    if not reqs or not plan.used:
        return Assignment(tuple(vehicle), float(sum(r.adhoc_cost for r in reqs)), scenario.id)
    cands = candidates(instance, plan, reqs)
    blocks = _components(cands) if decompose else [
        (sorted(i for i, vs in cands.items() if vs), list(plan.used))]
    proven = True
    for ri, vi in blocks:
        key = None
        if cache is not None:
            key = (scenario.id, method, node_limit, tuple(reqs[i].id for i in ri),
                   tuple(plan.routes[v] for v in vi))
            if key in cache:
                pattern, ok = cache[key]
                for i_local, v_local in pattern:
                    vehicle[ri[i_local]] = vi[v_local]
                proven &= ok
                continue
        chosen, ok = _solve_block(instance, plan, scenario, ri, vi, backend, formulation,
                                  method, node_limit, time_limit)
        proven &= ok
        for i, v in chosen.items():
            vehicle[i] = v
        if cache is not None:
            vpos = {v: k for k, v in enumerate(vi)}
            rpos = {i: k for k, i in enumerate(ri)}
            cache[key] = (tuple((rpos[i], vpos[v]) for i, v in chosen.items()), ok)
    cost = float(sum(r.adhoc_cost for r, v in zip(reqs, vehicle) if v is None))
    return Assignment(tuple(vehicle), cost, scenario.id, proven)


# -- checking and brute force ---------------------------------------------------------

def check_assignment(instance: ServiceInstance, plan: Plan, scenario: Scenario,
                     assignment: Assignment, tol: float = 1e-9) -> list[str]:
    """Verify the assignment with the raw quadratic detour forms."""
    bad = []
    reqs = scenario.requests
    cap = instance.fleet.capacity
    if len(assignment.vehicle) != len(reqs):
        return ["assignment length mismatch"]
    for i, v in enumerate(assignment.vehicle):
        if v is None:
            continue
        rid = plan.routes[v] if 0 <= v < len(plan.routes) else None
        if rid is None:
            bad.append(f"request {reqs[i].id} on unrouted vehicle {v}")
        elif not instance.route(rid).traverses(reqs[i].od):
            bad.append(f"request {reqs[i].id} off the route of vehicle {v}")
    if bad:
        return bad
    expect = sum(r.adhoc_cost for r, v in zip(reqs, assignment.vehicle) if v is None)
    if abs(expect - assignment.cost) > 1e-9 * max(1.0, expect):
        bad.append("reported cost differs from unserved ad hoc costs")
    for v in plan.used:
        route = instance.route(plan.routes[v])
        mine = [i for i, u in enumerate(assignment.vehicle) if u == v]
        for pos in range(route.m - 1):
            load = 0
            for i in mine:
                a, b = route.segment(reqs[i].od)
                if a <= pos < b:
                    load += reqs[i].passengers
            if load > cap:
                bad.append(f"vehicle {v}: load {load} over capacity at position {pos}")
        det = vehicle_zone_detours(scenario, assignment, v, route.zone_sequence)
        if "zone" in instance.detour_modes:
            for z, t in det.items():
                if t > instance.zone(z).max_detour + tol:
                    bad.append(f"vehicle {v}: zone {z} detour {t:.4f} over budget")
        if "trip" in instance.detour_modes and sum(det.values()) > instance.trip_detour_limit + tol:
            bad.append(f"vehicle {v}: trip detour over budget")
        if "od" in instance.detour_modes:
            for od in instance.od_set:
                lim = instance.od_limit(od)
                if math.isfinite(lim) and route.traverses(od):
                    tot = sum(det.get(z, 0.0) for z in dict.fromkeys(route.zones_between(od)))
                    if tot > lim + tol:
                        bad.append(f"vehicle {v}: OD {od} detour over budget")
    return bad


def vehicle_zone_detours(scenario: Scenario, assignment: Assignment, v: int,
                         zones: Sequence[str]) -> dict[str, float]:
    out = {}
    for z in dict.fromkeys(zones):
        T = scenario.matrices[z]
        flags = np.zeros(T.size)
        for i, u in enumerate(assignment.vehicle):
            if u == v:
                r = scenario.requests[i]
                if z in (r.origin, r.dest):
                    flags[T.index(r.id)] = 1.0
        if flags.any():
            out[z] = zonal_detour(T, flags)
    return out


def brute_force_p2(instance: ServiceInstance, plan: Plan, scenario: Scenario,
                   limit: int = 200_000) -> float:
    """Exhaustive minimum ad hoc cost over every request-to-vehicle assignment."""
    reqs = scenario.requests
    cands = candidates(instance, plan, reqs)
    options = [[None] + cands[i] for i in range(len(reqs))]
    if math.prod(len(o) for o in options) > limit:
        raise ValueError("enumeration too large")
    best = math.inf
    for combo in itertools.product(*options):
        a = Assignment(combo, float(sum(r.adhoc_cost for r, v in zip(reqs, combo) if v is None)))
        if a.cost < best and not check_assignment(instance, plan, scenario, a):
            best = a.cost
    return best


# -- evaluation ------------------------------------------------------------------------

def evaluate(instance: ServiceInstance, plan: Plan, scenarios: Sequence[Scenario],
             backend: str = DEFAULT_BACKEND, cache: dict | None = None,
             method: str = "search", node_limit: int | None = NODE_LIMIT) -> CostReport:
    """Expected ad hoc cost and service statistics of ``plan`` over ``scenarios``."""
    total_p = sum(s.probability for s in scenarios)
    if scenarios and abs(total_p - 1.0) > 1e-9:
        raise ValueError(f"scenario probabilities sum to {total_p}")
    costs, served, n_req = [], 0, 0
    pax_seg, seat_seg = 0.0, 0.0
    tot_det, max_det, visits = 0.0, 0.0, 0
    zone_sum: dict[str, float] = {}
    zone_cnt: dict[str, int] = {}
    q_bar = 0.0
    unproven = 0
    cap = instance.fleet.capacity
    used = plan.used
    seats = sum(cap * (instance.route(plan.routes[v]).m - 1) for v in used)
    for sc in scenarios:
        a = solve_p2(instance, plan, sc, backend=backend, cache=cache, method=method,
                     node_limit=node_limit)
        unproven += not a.proven
        costs.append(a.cost)
        q_bar += sc.probability * a.cost
        n_req += len(sc.requests)
        served += len(a.served)
        seat_seg += sc.probability * seats
        sc_tot = 0.0
        sc_max = 0.0
        for v in used:
            route = instance.route(plan.routes[v])
            for i in a.served:
                if a.vehicle[i] == v:
                    s0, s1 = route.segment(sc.requests[i].od)
                    pax_seg += sc.probability * sc.requests[i].passengers * (s1 - s0)
            det = vehicle_zone_detours(sc, a, v, route.zone_sequence)
            vt = sum(det.values())
            sc_tot += vt
            sc_max += max(det.values(), default=0.0)
            visits_v = len(det)
            visits += visits_v
            for z, t in det.items():
                zone_sum[z] = zone_sum.get(z, 0.0) + t
                zone_cnt[z] = zone_cnt.get(z, 0) + 1
        tot_det += sc.probability * sc_tot
        max_det += sc.probability * (sc_max / len(used) if used else 0.0)
    all_det = sum(zone_sum.values())
    return CostReport(
        fixed_cost=plan.cost,
        expected_adhoc=q_bar,
        total=plan.cost + q_bar,
        scenario_costs=costs,
        service_rate=served / n_req if n_req else 1.0,
        occupancy=pax_seg / seat_seg if seat_seg else 0.0,
        total_detour=tot_det,
        max_detour_per_vehicle=max_det,
        detour_per_zone_visit=all_det / visits if visits else 0.0,
        zone_mean_detour={z: zone_sum[z] / zone_cnt[z] for z in zone_sum},
        vehicles_used=len(used),
        unproven=unproven,
    )
