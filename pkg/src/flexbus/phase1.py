"""Phase-1 fleet routing at given reliability levels.

Vehicles are interchangeable, so the model works with route *slots*: slot
``(p, j)`` is the ``j``-th vehicle put on route ``p`` and slots of a route
are filled in order.  A solved model is mapped back onto vehicle ids in
slot order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import milp
from .detour import phase1_detour, raw_phase1_detour, tangent_cuts
from .domain import (M1, OD, Route, ServiceInstance, build_converting_matrix,
                     serving_components)
from .stochastic import ReliabilityError, demand_quantile, detour_quantile

log = logging.getLogger(__name__)

DEFAULT_BACKEND = "highs"


class P1Infeasible(RuntimeError):
    """No fleet plan covers the demanded volumes at the requested reliability."""


@dataclass(frozen=True)
class ReliabilityVector:
    """Volume reliabilities per category and detour reliabilities per zone."""

    volume: tuple[float, ...]
    detour: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "volume", tuple(float(r) for r in self.volume))
        object.__setattr__(self, "detour", tuple(float(r) for r in self.detour))
        for r in self.volume + self.detour:
            if not 0.0 <= r < 1.0:
                raise ReliabilityError(f"reliability {r} outside [0, 1)")

    @classmethod
    def uniform(cls, instance: ServiceInstance, volume: float, detour: float | None = None):
        detour = volume if detour is None else detour
        return cls((volume,) * len(instance.categories), (detour,) * len(instance.zones))

    @classmethod
    def from_array(cls, instance: ServiceInstance, arr: Sequence[float]) -> "ReliabilityVector":
        arr = [float(a) for a in arr]
        ne = len(instance.categories)
        return cls(tuple(arr[:ne]), tuple(arr[ne:]))

    def as_array(self) -> np.ndarray:
        return np.array(self.volume + self.detour)

    def __len__(self):
        return len(self.volume) + len(self.detour)


def resolve_reliability(instance: ServiceInstance, rho: ReliabilityVector
                        ) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Planned volumes ``delta`` per category and segment detours ``tau2`` per zone."""
    if len(rho.volume) != len(instance.categories) or len(rho.detour) != len(instance.zones):
        raise ValueError("reliability vector does not match the instance")
    delta = tuple(demand_quantile(c.volume_dist, r) for c, r in zip(instance.categories, rho.volume))
    tau2 = tuple(detour_quantile(z.detour_dist, r) for z, r in zip(instance.zones, rho.detour))
    return delta, tau2


@dataclass
class Plan:
    """Phase-1 result mapped onto vehicle ids ``0..|V|-1``.

    ``routes[v]`` is the route id of vehicle ``v`` or ``None``; ``y`` maps
    ``(category id, v)`` to the number of planned requests.
    """

    routes: tuple[str | None, ...]
    y: dict[tuple[str, int], int]
    cost: float
    delta: tuple[int, ...] = ()
    tau2: tuple[float, ...] = ()
    y_tilde: dict[tuple[int, str], int] = field(default_factory=dict)
    detour: dict[tuple[int, str], float] = field(default_factory=dict)

    @property
    def used(self) -> list[int]:
        return [v for v, r in enumerate(self.routes) if r is not None]

    @property
    def vehicle_count(self) -> int:
        return len(self.used)

    def deployment(self) -> tuple[tuple[str, int], ...]:
        counts: dict[str, int] = {}
        for r in self.routes:
            if r is not None:
                counts[r] = counts.get(r, 0) + 1
        return tuple(sorted(counts.items()))

    def zeta(self, instance: ServiceInstance, v: int) -> dict[OD, int]:
        out: dict[OD, int] = {}
        for c in instance.categories:
            n = self.y.get((c.id, v), 0)
            if n:
                out[c.od] = out.get(c.od, 0) + n * c.passengers
        return out

    def permuted(self, perm: Sequence[int]) -> "Plan":
        """Vehicle ``v`` of the result is vehicle ``perm[v]`` of this plan."""
        inv = {old: new for new, old in enumerate(perm)}
        return Plan(tuple(self.routes[perm[v]] for v in range(len(perm))),
                    {(e, inv[v]): n for (e, v), n in self.y.items()}, self.cost, self.delta,
                    self.tau2, {(inv[v], z): n for (v, z), n in self.y_tilde.items()},
                    {(inv[v], z): t for (v, z), t in self.detour.items()})

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "vehicles": [{"vehicle": v, "route": r} for v, r in enumerate(self.routes) if r],
            "y": [{"category": e, "vehicle": v, "count": n} for (e, v), n in sorted(self.y.items())
                  if n],
            "delta": list(self.delta),
            "tau2": list(self.tau2),
        }


def empty_plan(instance: ServiceInstance, delta=(), tau2=()) -> Plan:
    return Plan((None,) * instance.fleet.size, {}, 0.0, tuple(delta), tuple(tau2))


def plan_from_deployment(instance: ServiceInstance, deployment: Mapping[str, int] | Sequence
                         ) -> Plan:
    """Plan with the given route counts and no planned requests."""
    items = deployment.items() if isinstance(deployment, Mapping) else deployment
    routes: list[str | None] = []
    for rid, k in sorted(items):
        routes.extend([rid] * int(k))
    if len(routes) > instance.fleet.size:
        raise ValueError("deployment exceeds the fleet")
    routes.extend([None] * (instance.fleet.size - len(routes)))
    cost = sum(instance.route_cost(instance.route(r)) for r in routes if r)
    return Plan(tuple(routes), {}, cost)


# -- model construction -----------------------------------------------------------

@dataclass
class P1Model:
    model: milp.Model
    slots: list[tuple[str, int]]
    x: dict[tuple[str, int], int]
    y: dict[tuple[str, str, int], int]


def _zone_count_coeffs(instance, cats, route: Route, ycols, z: str) -> dict[int, float]:
    coeffs: dict[int, float] = {}
    for c in cats:
        k = ycols.get(c.id)
        if k is not None and z in (c.origin, c.dest):
            coeffs[k] = coeffs.get(k, 0.0) + 1.0
    return coeffs


def build_p1(instance: ServiceInstance, delta: Sequence[int], tau2: Sequence[float],
             fleet_size: int | None = None) -> P1Model:
    """Assemble the phase-1 MILP for planned volumes ``delta`` and segment detours ``tau2``."""
    cap = instance.fleet.capacity
    V = instance.fleet.size if fleet_size is None else fleet_size
    tau_by_zone = {z.id: t for z, t in zip(instance.zones, tau2)}
    active = [(c, int(d)) for c, d in zip(instance.categories, delta) if d > 0]
    m = milp.Model("p1")
    slots: list[tuple[str, int]] = []
    xv: dict[tuple[str, int], int] = {}
    yv: dict[tuple[str, str, int], int] = {}
    by_cat: dict[str, list[int]] = {c.id: [] for c, _ in active}
    max_n = max((c.passengers for c, _ in active), default=1)
    max_d = max((d for _, d in active), default=0)
    big_m1 = len(active) * max_n * max_d + 1
    cuts_by_zone = {z.id: tangent_cuts(z.curve, cap) for z in instance.zones}
    objective: dict[int, float] = {}

    for route in instance.routes:
        served = [(c, d) for c, d in active if route.traverses(c.od)]
        if not served:
            continue
        n_slots = min(V, sum(d for _, d in served))
        cmat = build_converting_matrix(route, [c.od for c, _ in served], M1)
        prev_x = None
        for j in range(n_slots):
            tag = f"{route.id}.{j}"
            x = m.add_var(f"x[{tag}]", milp.BINARY)
            xv[(route.id, j)] = x
            slots.append((route.id, j))
            objective[x] = instance.route_cost(route)
            if prev_x is not None:
                m.add_constr({prev_x: 1.0, x: -1.0}, ">=", 0.0, f"order[{tag}]")
            prev_x = x
            ycols: dict[str, int] = {}
            for c, d in served:
                ub = min(d, cap // c.passengers)
                k = m.add_var(f"y[{c.id},{tag}]", milp.INTEGER, 0.0, float(ub))
                ycols[c.id] = k
                yv[(c.id, route.id, j)] = k
                by_cat[c.id].append(k)
                m.add_constr({k: 1.0, x: -float(ub)}, "<=", 0.0, f"link[{c.id},{tag}]")
            # passengers only on a routed slot
            m.add_constr({**{ycols[c.id]: float(c.passengers) for c, _ in served}, x: -big_m1},
                         "<=", 0.0, f"route_only[{tag}]")
            # onboard load at each non-terminal position
            rows = []
            for i in range(len(cmat.rows)):
                row = {ycols[c.id]: cmat.matrix[i, col] * c.passengers
                       for col, (c, _) in enumerate(served) if cmat.matrix[i, col] != 0}
                if row:
                    rows.append(row)
            if rows:
                top = max(milp.max_activity(m, r) for r in rows)
                bound = max(2.0, math.ceil(top / cap) + 1.0)
                milp.linearize_bilinear_indicator(m, x, rows, cap, bound, f"cap[{tag}]")
            _add_detour_block(instance, m, route, tag, served, ycols, tau_by_zone,
                              cuts_by_zone, cap)
    if slots:
        m.add_constr({xv[s]: 1.0 for s in slots}, "<=", float(V), "fleet")
    for c, d in active:
        if not by_cat[c.id]:
            m.add_constr({}, "=", float(d), f"demand[{c.id}]")
        else:
            m.add_constr({k: 1.0 for k in by_cat[c.id]}, "=", float(d), f"demand[{c.id}]")
    m.set_objective(objective)
    return P1Model(m, slots, xv, yv)


def _add_detour_block(instance, m, route, tag, served, ycols, tau_by_zone, cuts_by_zone, cap):
    modes = instance.detour_modes
    need_t = bool(modes & {"trip", "od"})
    tvars: dict[str, int] = {}
    for z in dict.fromkeys(route.zone_sequence):
        count = {}
        for c, _ in served:
            if z in (c.origin, c.dest):
                count[ycols[c.id]] = count.get(ycols[c.id], 0.0) + 1.0
        if not count:
            continue
        zone = instance.zone(z)
        tau = tau_by_zone[z]
        cuts = cuts_by_zone[z]
        lo = float(min(zone.curve(np.arange(0, 2 * cap + 1))))
        s = m.add_var(f"s[{tag},{z}]", milp.CONTINUOUS, lo, None)
        for i, (slope, icpt) in enumerate(cuts):
            # s >= slope * y~ + icpt
            m.add_constr({s: 1.0, **{k: -slope * a for k, a in count.items()}}, ">=", icpt,
                         f"cut[{tag},{z},{i}]")
        # raw detour expression: 2 s + tau * y~ - tau
        raw = {s: 2.0, **{k: tau * a for k, a in count.items()}}
        raw0 = raw_phase1_detour(0, zone.curve, tau)
        upper = sum(m.variables[k].ub * a for k, a in count.items())
        gate_zone = raw0 > zone.max_detour
        gate_t = need_t and raw0 > 0
        a = None
        if gate_zone or gate_t:
            a = m.add_var(f"a[{tag},{z}]", milp.BINARY)
            m.add_constr({**count, a: -float(upper)}, "<=", 0.0, f"visit[{tag},{z}]")
        if "zone" in modes:
            if gate_zone:
                slack = raw0 - zone.max_detour
                m.add_constr({**raw, a: slack}, "<=", zone.max_detour + tau + slack,
                             f"detour[{tag},{z}]")
            else:
                m.add_constr(raw, "<=", zone.max_detour + tau, f"detour[{tag},{z}]")
        if need_t:
            t = m.add_var(f"t[{tag},{z}]", milp.CONTINUOUS, 0.0, None)
            tvars[z] = t
            coeffs = {t: 1.0, **{k: -v for k, v in raw.items()}}
            if gate_t:
                # t >= raw - raw0 * (1 - a)
                coeffs[a] = -raw0
                m.add_constr(coeffs, ">=", -tau - raw0, f"tdef[{tag},{z}]")
            else:
                m.add_constr(coeffs, ">=", -tau, f"tdef[{tag},{z}]")
    if "trip" in modes and tvars:
        m.add_constr({t: 1.0 for t in tvars.values()}, "<=", instance.trip_detour_limit,
                     f"trip[{tag}]")
    if "od" in modes and tvars:
        for od in instance.od_set:
            lim = instance.od_limit(od)
            if not math.isfinite(lim) or not route.traverses(od):
                continue
            zs = [tvars[z] for z in dict.fromkeys(route.zones_between(od)) if z in tvars]
            if zs:
                m.add_constr({t: 1.0 for t in zs}, "<=", lim, f"odlim[{tag},{od[0]}{od[1]}]")


# -- solving ---------------------------------------------------------------------------

def _extract(instance, pm: P1Model, sol: milp.Solution, fleet_offset: int, V: int,
             delta, tau2) -> tuple[list[str | None], dict]:
    routes: list[str | None] = []
    y: dict[tuple[str, int], int] = {}
    for (rid, j) in pm.slots:
        if sol[pm.x[(rid, j)]] > 0.5:
            v = fleet_offset + len(routes)
            routes.append(rid)
            for (cid, r2, j2), k in pm.y.items():
                if r2 == rid and j2 == j:
                    n = int(round(sol[k]))
                    if n:
                        y[(cid, v)] = n
    return routes, y


def finalize_plan(instance: ServiceInstance, routes: list[str | None], y: dict, delta, tau2) -> Plan:
    routes = list(routes) + [None] * (instance.fleet.size - len(routes))
    tau_by_zone = {z.id: t for z, t in zip(instance.zones, tau2)}
    y_tilde: dict[tuple[int, str], int] = {}
    det: dict[tuple[int, str], float] = {}
    for v, rid in enumerate(routes):
        if rid is None:
            continue
        for z in dict.fromkeys(instance.route(rid).zone_sequence):
            n = sum(k for (cid, vv), k in y.items() if vv == v
                    and z in (instance.category(cid).origin, instance.category(cid).dest))
            y_tilde[(v, z)] = n
            det[(v, z)] = phase1_detour(n, instance.zone(z).curve, tau_by_zone[z])
    cost = sum(instance.route_cost(instance.route(r)) for r in routes if r)
    return Plan(tuple(routes), y, cost, tuple(delta), tuple(tau2), y_tilde, det)


def _solve_model(instance, delta, tau2, backend, fleet_size=None):
    pm = build_p1(instance, delta, tau2, fleet_size)
    sol = milp.solve(pm.model, backend=backend)
    if sol.status == milp.INFEASIBLE:
        raise P1Infeasible("phase-1 model is infeasible")
    if not sol.is_optimal:
        raise RuntimeError(f"phase-1 solve ended with status {sol.status}")
    return pm, sol


def solve_p1_resolved(instance: ServiceInstance, delta: Sequence[int], tau2: Sequence[float],
                      backend: str = DEFAULT_BACKEND, decompose: bool = True,
                      cache: dict | None = None) -> Plan:
    """Optimal plan for given planned volumes and segment detours."""
    delta = tuple(int(d) for d in delta)
    tau2 = tuple(float(t) for t in tau2)
    key = (delta, tau2, backend)
    if cache is not None and key in cache:
        hit = cache[key]
        if isinstance(hit, P1Infeasible):
            raise hit
        return hit
    try:
        plan = _solve_resolved(instance, delta, tau2, backend, decompose)
    except P1Infeasible as exc:
        if cache is not None:
            cache[key] = exc
        raise
    if cache is not None:
        cache[key] = plan
    return plan


def _solve_resolved(instance, delta, tau2, backend, decompose) -> Plan:
    if not any(delta):
        return empty_plan(instance, delta, tau2)
    V = instance.fleet.size
    cats = [c for c, d in zip(instance.categories, delta) if d > 0]
    for c in cats:
        if not instance.routes_serving(c.od):
            raise P1Infeasible(f"no route serves category {c.id}")
    comps = serving_components(cats, instance.routes) if decompose else []
    if len(comps) > 1:
        routes: list[str | None] = []
        y: dict = {}
        ok = True
        for ci, ri in comps:
            sub_ids = {cats[i].id for i in ci}
            sub_delta = tuple(d if c.id in sub_ids else 0 for c, d in zip(instance.categories, delta))
            pm, sol = _solve_model(instance, sub_delta, tau2, backend)
            r_sub, y_sub = _extract(instance, pm, sol, len(routes), V, sub_delta, tau2)
            routes.extend(r_sub)
            y.update(y_sub)
            if len(routes) > V:
                ok = False
                break
        if ok:
            return finalize_plan(instance, routes, y, delta, tau2)
        log.info("component plans exceed the fleet; solving the full model")
    pm, sol = _solve_model(instance, delta, tau2, backend)
    routes, y = _extract(instance, pm, sol, 0, V, delta, tau2)
    return finalize_plan(instance, routes, y, delta, tau2)


def solve_p1(instance: ServiceInstance, rho: ReliabilityVector, backend: str = DEFAULT_BACKEND,
             decompose: bool = True, cache: dict | None = None) -> Plan:
    """Resolve ``rho`` into volumes and detours, then solve phase 1."""
    delta, tau2 = resolve_reliability(instance, rho)
    return solve_p1_resolved(instance, delta, tau2, backend, decompose, cache)


# -- independent checker -----------------------------------------------------------------

def check_plan(instance: ServiceInstance, plan: Plan, delta: Sequence[int] | None = None,
               tau2: Sequence[float] | None = None, tol: float = 1e-9) -> list[str]:
    """Re-derive every phase-1 predicate from raw data; returns violation messages."""
    delta = plan.delta if delta is None else tuple(delta)
    tau2 = plan.tau2 if tau2 is None else tuple(tau2)
    cap = instance.fleet.capacity
    bad = []
    if len(plan.routes) != instance.fleet.size:
        bad.append("plan does not list every vehicle")
    for (cid, v), n in plan.y.items():
        if n < 0 or int(n) != n:
            bad.append(f"y[{cid},{v}] = {n} is not a non-negative integer")
        if n > 0 and plan.routes[v] is None:
            bad.append(f"vehicle {v} carries category {cid} without a route")
    for c, d in zip(instance.categories, delta):
        got = sum(n for (cid, _), n in plan.y.items() if cid == c.id)
        if got != d:
            bad.append(f"category {c.id}: planned {got} of {d}")
    tau_by_zone = {z.id: t for z, t in zip(instance.zones, tau2)}
    expected = sum(instance.route_cost(instance.route(r)) for r in plan.routes if r)
    if abs(expected - plan.cost) > 1e-6 * max(1.0, abs(expected)):
        bad.append(f"cost {plan.cost} differs from route costs {expected}")
    for v, rid in enumerate(plan.routes):
        if rid is None:
            continue
        route = instance.route(rid)
        zeta = plan.zeta(instance, v)
        cmat = build_converting_matrix(route, instance.od_set, M1)
        vec = np.array([zeta.get(od, 0) for od in instance.od_set], dtype=float)
        load = cmat.load(vec)
        if np.any(load > cap + tol):
            bad.append(f"vehicle {v}: onboard load {load.max()} exceeds {cap}")
        tvals = {}
        for z in dict.fromkeys(route.zone_sequence):
            n = sum(k for (cid, vv), k in plan.y.items() if vv == v
                    and z in (instance.category(cid).origin, instance.category(cid).dest))
            t = phase1_detour(n, instance.zone(z).curve, tau_by_zone[z])
            tvals[z] = t
            if "zone" in instance.detour_modes and t > instance.zone(z).max_detour + tol:
                bad.append(f"vehicle {v}: detour {t:.4f} in zone {z} over budget")
        if "trip" in instance.detour_modes and sum(tvals.values()) > instance.trip_detour_limit + tol:
            bad.append(f"vehicle {v}: trip detour over budget")
        if "od" in instance.detour_modes:
            for od in instance.od_set:
                lim = instance.od_limit(od)
                if math.isfinite(lim) and route.traverses(od):
                    tot = sum(tvals[z] for z in dict.fromkeys(route.zones_between(od)))
                    if tot > lim + tol:
                        bad.append(f"vehicle {v}: OD {od} detour over budget")
    return bad
