"""Problem-instance data model and pure derived structures.

Zones, zonal routes, demand categories, realised requests and the fleet are
frozen dataclasses.  Derived views (converting matrices, OD passenger tallies,
shortest direct routes, independent sub-instances) are plain functions.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detour import DETOUR_MIN_PER_M, BoundaryDetourCurve
from .stochastic import Distribution

M1 = 1e6
M2 = 1e9


OD = tuple[str, str]

DETOUR_MODES = frozenset({"zone", "trip", "od"})


class InstanceError(ValueError):
    """Raised for instances that violate a structural assumption."""


class InvalidRouteError(InstanceError):
    pass


class UnreachableODError(InstanceError):
    pass


@dataclass(frozen=True)
class Zone:
    """A service zone.

    Parameters
    ----------
    id : str
    max_detour : float
        Per-vehicle detour budget inside the zone, minutes.
    curve : BoundaryDetourCurve
        Boundary-to-nearest-request detour as a function of request count.
    detour_dist : Distribution
        Law of the per-segment detour time.
    bounds : tuple of float, optional
        ``(xmin, ymin, xmax, ymax)`` in metres, for coordinate-based detours.
    """

    id: str
    max_detour: float
    curve: BoundaryDetourCurve
    detour_dist: Distribution
    bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not self.max_detour > 0:
            raise InstanceError(f"zone {self.id}: max_detour must be positive")
        if self.bounds is not None:
            x0, y0, x1, y1 = self.bounds
            if not (x1 > x0 and y1 > y0):
                raise InstanceError(f"zone {self.id}: degenerate bounds")

    @property
    def centroid(self) -> tuple[float, float]:
        if self.bounds is None:
            raise InstanceError(f"zone {self.id} has no geometry")
        x0, y0, x1, y1 = self.bounds
        return (x0 + x1) / 2, (y0 + y1) / 2

    @property
    def diagonal(self) -> float:
        if self.bounds is None:
            raise InstanceError(f"zone {self.id} has no geometry")
        x0, y0, x1, y1 = self.bounds
        return math.hypot(x1 - x0, y1 - y0)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    def detour_from_point(self, x: float, y: float) -> float:
        cx, cy = self.centroid
        return math.hypot(x - cx, y - cy) * DETOUR_MIN_PER_M


@dataclass(frozen=True)
class Route:
    """Ordered zonal visit sequence with a base operating cost."""

    id: str
    zone_sequence: tuple[str, ...]
    operating_cost: float

    def __post_init__(self):
        object.__setattr__(self, "zone_sequence", tuple(self.zone_sequence))
        seq = self.zone_sequence
        if len(seq) < 2:
            raise InvalidRouteError(f"route {self.id}: needs at least two zones")
        if any(a == b for a, b in zip(seq, seq[1:])):
            raise InvalidRouteError(f"route {self.id}: consecutive zones must differ")
        if not self.operating_cost > 0:
            raise InvalidRouteError(f"route {self.id}: operating cost must be positive")

    @property
    def m(self) -> int:
        return len(self.zone_sequence)

    def segment(self, od: OD) -> tuple[int, int] | None:
        """Positions ``(i, j)``, ``i < j``, of the first traversal of ``od``, else None."""
        r, s = od
        seq = self.zone_sequence
        for i, z in enumerate(seq):
            if z == r:
                for j in range(i + 1, len(seq)):
                    if seq[j] == s:
                        return i, j
        return None

    def traverses(self, od: OD) -> bool:
        return self.segment(od) is not None

    def zones_between(self, od: OD) -> tuple[str, ...]:
        """Zones from origin to destination inclusive (empty if not traversed)."""
        seg = self.segment(od)
        if seg is None:
            return ()
        return self.zone_sequence[seg[0]:seg[1] + 1]


@dataclass(frozen=True)
class DemandCategory:
    """Aggregate of requests with a common OD and party size."""

    id: str
    origin: str
    dest: str
    passengers: int
    volume_dist: Distribution
    adhoc_cost: float | None = None
    request_pool: tuple[tuple[float, float, float, float], ...] | None = None

    def __post_init__(self):
        if self.origin == self.dest:
            raise InstanceError(f"category {self.id}: intra-zone demand is not modelled")
        if self.passengers < 1:
            raise InstanceError(f"category {self.id}: passengers must be >= 1")
        if self.adhoc_cost is not None and self.adhoc_cost < 0:
            raise InstanceError(f"category {self.id}: negative ad hoc cost")

    @property
    def od(self) -> OD:
        return (self.origin, self.dest)


@dataclass(frozen=True)
class ServiceRequest:
    """One realised booking."""

    id: str
    category: str
    origin: str
    dest: str
    passengers: int
    origin_detour: float
    dest_detour: float
    adhoc_cost: float
    origin_xy: tuple[float, float] | None = None
    dest_xy: tuple[float, float] | None = None

    def __post_init__(self):
        if self.origin_detour < 0 or self.dest_detour < 0:
            raise InstanceError(f"request {self.id}: negative detour")
        if self.adhoc_cost < 0:
            raise InstanceError(f"request {self.id}: negative ad hoc cost")

    @property
    def od(self) -> OD:
        return (self.origin, self.dest)

    def detour_in(self, zone: str) -> float | None:
        if zone == self.origin:
            return self.origin_detour
        if zone == self.dest:
            return self.dest_detour
        return None

    def xy_in(self, zone: str):
        if zone == self.origin:
            return self.origin_xy
        if zone == self.dest:
            return self.dest_xy
        return None


@dataclass(frozen=True)
class Fleet:
    size: int
    capacity: int
    cost_factor: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise InstanceError("fleet size must be >= 1")
        if self.capacity < 1:
            raise InstanceError("capacity must be >= 1")
        if not self.cost_factor > 0:
            raise InstanceError("cost factor must be positive")


@dataclass(frozen=True)
class ServiceInstance:
    """Immutable problem definition.

    ``detour_modes`` is any non-empty subset of ``{"zone", "trip", "od"}``:
    per-zone budgets, a per-vehicle trip budget ``trip_detour_limit`` and
    per-OD budgets ``od_detour_limits``.  ``reduction_rule`` selects how
    realised detour matrices get their off-diagonal reductions (``"A"`` uses
    detours only, ``"B"`` uses request proximity).
    """

    zones: tuple[Zone, ...]
    routes: tuple[Route, ...]
    categories: tuple[DemandCategory, ...]
    fleet: Fleet
    od_set: tuple[OD, ...] = ()
    links: tuple[tuple[str, str, float], ...] = ()
    adhoc_ratio: float = 0.9
    detour_modes: frozenset = frozenset({"zone"})
    trip_detour_limit: float | None = None
    od_detour_limits: Mapping[OD, float] = field(default_factory=dict)
    reduction_rule: str = "A"
    max_distance: float | None = None
    route_mode: str = "explicit"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(self.zones))
        object.__setattr__(self, "routes", tuple(self.routes))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "links", tuple(tuple(l) for l in self.links))
        object.__setattr__(self, "detour_modes", frozenset(self.detour_modes))
        if not self.od_set:
            ods = []
            for c in self.categories:
                if c.od not in ods:
                    ods.append(c.od)
            object.__setattr__(self, "od_set", tuple(ods))
        else:
            object.__setattr__(self, "od_set", tuple(tuple(o) for o in self.od_set))
        object.__setattr__(self, "_zone_map", {z.id: z for z in self.zones})
        object.__setattr__(self, "_route_map", {r.id: r for r in self.routes})
        object.__setattr__(self, "_cat_map", {c.id: c for c in self.categories})
        self.validate()

    # -- lookups -------------------------------------------------------------
    def zone(self, zid: str) -> Zone:
        return self._zone_map[zid]

    def route(self, rid: str) -> Route:
        return self._route_map[rid]

    def category(self, cid: str) -> DemandCategory:
        return self._cat_map[cid]

    @property
    def zone_ids(self) -> tuple[str, ...]:
        return tuple(z.id for z in self.zones)

    def route_cost(self, route: Route) -> float:
        return route.operating_cost * self.fleet.cost_factor

    def routes_serving(self, od: OD) -> tuple[Route, ...]:
        return tuple(r for r in self.routes if r.traverses(od))

    def direct_cost(self, od: OD) -> float:
        """Base cost of the cheapest way to run ``od`` directly."""
        if self.links:
            try:
                return _dijkstra(_adjacency(self.links), od[0], od[1])[0]
            except UnreachableODError:
                pass
        serving = self.routes_serving(od)
        if not serving:
            raise UnreachableODError(f"no route serves OD {od}")
        return min(r.operating_cost for r in serving)

    def adhoc_cost(self, cat: DemandCategory) -> float:
        if cat.adhoc_cost is not None:
            return cat.adhoc_cost
        return self.adhoc_ratio * self.direct_cost(cat.od)

    def od_limit(self, od: OD) -> float:
        return self.od_detour_limits.get(tuple(od), math.inf)

    def with_changes(self, **kw) -> "ServiceInstance":
        return replace(self, **kw)

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        zids = set(self._zone_map)
        if len(zids) != len(self.zones):
            raise InstanceError("duplicate zone ids")
        if len(self._route_map) != len(self.routes):
            raise InstanceError("duplicate route ids")
        if len(self._cat_map) != len(self.categories):
            raise InstanceError("duplicate category ids")
        if not self.detour_modes or not self.detour_modes <= DETOUR_MODES:
            raise InstanceError(f"detour modes must be a non-empty subset of {sorted(DETOUR_MODES)}")
        if "trip" in self.detour_modes and self.trip_detour_limit is None:
            raise InstanceError("trip detour mode needs trip_detour_limit")
        if self.reduction_rule not in ("A", "B"):
            raise InstanceError("reduction_rule must be 'A' or 'B'")
        if self.adhoc_ratio < 0:
            raise InstanceError("adhoc_ratio must be non-negative")
        if self.route_mode not in ("explicit", "auto"):
            raise InstanceError("route_mode must be 'explicit' or 'auto'")
        for z in self.zones:
            if 2 * z.curve(1) > z.max_detour + 1e-12:
                raise InstanceError(f"zone {z.id}: a single request exceeds the detour budget")
        for r in self.routes:
            missing = set(r.zone_sequence) - zids
            if missing:
                raise InstanceError(f"route {r.id} uses unknown zones {sorted(missing)}")
        for c in self.categories:
            if c.origin not in zids or c.dest not in zids:
                raise InstanceError(f"category {c.id} uses unknown zones")
            if c.passengers > self.fleet.capacity:
                raise InstanceError(f"category {c.id} exceeds vehicle capacity")
        cat_ods = {c.od for c in self.categories}
        for od in cat_ods:
            if not self.routes_serving(od):
                raise UnreachableODError(f"no route serves OD {od}")
        if not cat_ods <= set(self.od_set):
            raise InstanceError("od_set must contain every category OD")


# -- derived structures ----------------------------------------------------------

@dataclass(frozen=True)
class ConvertingMatrix:
    """Maps per-OD passenger counts to onboard loads at non-terminal route positions."""

    route_id: str
    rows: tuple[str, ...]
    cols: tuple[OD, ...]
    matrix: np.ndarray
    big_m: float

    def load(self, zeta: Sequence[float]) -> np.ndarray:
        return self.matrix @ np.asarray(zeta, dtype=float)

    def entry(self, zone: str, od: OD) -> float:
        return float(self.matrix[self.rows.index(zone), self.cols.index(tuple(od))])


def build_converting_matrix(route: Route, od_set: Sequence[OD], big_m: float = M1) -> ConvertingMatrix:
    """Build ``B_p``: 1 where a row position lies on the OD segment, ``big_m`` for untraversed ODs."""
    if len(route.zone_sequence) < 2:
        raise InvalidRouteError(f"route {route.id}: needs at least two zones")
    od_set = tuple(tuple(o) for o in od_set)
    if not od_set:
        raise InstanceError("empty OD set")
    rows = route.zone_sequence[:-1]
    mat = np.zeros((len(rows), len(od_set)))
    for j, od in enumerate(od_set):
        seg = route.segment(od)
        if seg is None:
            mat[:, j] = big_m
        else:
            mat[seg[0]:seg[1], j] = 1.0
    return ConvertingMatrix(route.id, rows, od_set, mat, big_m)


def od_load(w: Sequence[int], requests: Sequence[ServiceRequest]) -> dict[OD, int]:
    """Passengers per OD among requests flagged in ``w``."""
    if len(w) != len(requests):
        raise ValueError("flag vector and request list differ in length")
    out: dict[OD, int] = {}
    for flag, req in zip(w, requests):
        out.setdefault(req.od, 0)
        out[req.od] += int(flag) * req.passengers
    return out


def od_vector(zeta: Mapping[OD, float], od_set: Sequence[OD]) -> np.ndarray:
    return np.array([zeta.get(tuple(od), 0) for od in od_set], dtype=float)


def _adjacency(links) -> dict[str, list[tuple[str, float]]]:
    adj: dict[str, list[tuple[str, float]]] = {}
    for a, b, c in links:
        if not c > 0:
            raise InstanceError(f"link {a}-{b}: cost must be positive")
        adj.setdefault(a, []).append((b, float(c)))
        adj.setdefault(b, [])
    return adj


def _dijkstra(adj, src: str, dst: str) -> tuple[float, tuple[str, ...]]:
    # heap ordered by (cost, path) so equal-cost paths resolve lexicographically
    heap = [(0.0, (src,))]
    done = set()
    while heap:
        cost, path = heapq.heappop(heap)
        node = path[-1]
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return cost, path
        for nxt, c in adj.get(node, ()):
            if nxt not in done:
                heapq.heappush(heap, (cost + c, path + (nxt,)))
    raise UnreachableODError(f"no path from {src} to {dst}")


def route_id_for(path: Sequence[str]) -> str:
    return "".join(path) if all(len(z) == 1 for z in path) else "-".join(path)


def undirected(links: Iterable[tuple[str, str, float]]) -> tuple[tuple[str, str, float], ...]:
    out = []
    for a, b, c in links:
        out.append((a, b, c))
        out.append((b, a, c))
    return tuple(out)


def shortest_direct_routes(links: Iterable[tuple[str, str, float]], od_set: Sequence[OD]) -> list[Route]:
    """One cheapest route per OD; links are directed ``(from, to, cost)`` triples."""
    adj = _adjacency(list(links))
    routes: list[Route] = []
    for r, s in od_set:
        cost, path = _dijkstra(adj, r, s)
        routes.append(Route(route_id_for(path), path, cost))
    return routes


# -- decomposition ------------------------------------------------------------------

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        a, b = self.find(i), self.find(j)
        if a != b:
            self.parent[max(a, b)] = min(a, b)


def serving_components(categories: Sequence[DemandCategory], routes: Sequence[Route]
                       ) -> list[tuple[list[int], list[int]]]:
    """Connected components of the category-route serving graph as index lists."""
    nc = len(categories)
    uf = _UnionFind(nc + len(routes))
    for i, c in enumerate(categories):
        for j, r in enumerate(routes):
            if r.traverses(c.od):
                uf.union(i, nc + j)
    groups: dict[int, tuple[list[int], list[int]]] = {}
    for i in range(nc):
        groups.setdefault(uf.find(i), ([], []))[0].append(i)
    for j in range(len(routes)):
        root = uf.find(nc + j)
        if root in groups:
            groups[root][1].append(j)
    return [groups[k] for k in sorted(groups)]


def decompose_instance(instance: ServiceInstance) -> list[ServiceInstance]:
    """Split into sub-instances whose categories share no serving route.

    Each sub-instance keeps every zone and the full fleet.  Routes that serve
    no category are dropped.
    """
    comps = serving_components(instance.categories, instance.routes)
    subs = []
    for k, (ci, ri) in enumerate(comps):
        cats = tuple(instance.categories[i] for i in ci)
        routes = tuple(instance.routes[j] for j in ri)
        ods = tuple(od for od in instance.od_set if any(c.od == od for c in cats))
        subs.append(replace(instance, categories=cats, routes=routes, od_set=ods,
                            name=f"{instance.name}[{k}]"))
    return subs
