"""Exact depth-first search for one phase-2 block (set-up side).

Requests are branched in a fixed order (dearest first); each is placed on a
candidate vehicle or left to the ad hoc service.  Pruning uses two facts:

* a zone's final detour on a vehicle is at least its current value minus the
  largest possible future reduction (``drift``), which is zero whenever the
  vehicle can hold at most ``cap + 1`` requests in that zone;
* any feasible final set ``F`` in a zone satisfies ``sum_{d in F} g_d <= limit``
  with ``g_d = tau_d + (K - 1 most negative reductions of row d)``, which gives
  a fractional-knapsack bound on the value still collectable.

The search itself runs compiled in :mod:`flexbus._p2kernel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._p2kernel import run_search

TOL = 1e-9
# convex weightings of two zone budgets tried by the joint bound
_LAMBDAS = np.array([[0.5, 0.5], [0.35, 0.65], [0.65, 0.35], [0.0, 0.0]])


@dataclass
class _Zone:
    zid: str
    limit: float
    T: np.ndarray            # block-local matrix over requests touching the zone
    members: list[int]       # block request positions, aligned with T
    local: dict[int, int]    # block request position -> row of T


def _row_bound(T: np.ndarray, k: int) -> np.ndarray:
    """``tau_d`` plus the ``k - 1`` most negative off-diagonal entries of each row."""
    n = T.shape[0]
    diag = np.diag(T).copy()
    if n <= 1 or k <= 1:
        return diag
    off = T.copy()
    np.fill_diagonal(off, 0.0)
    srt = np.sort(off, axis=1)
    return diag + srt[:, :min(k - 1, n - 1)].sum(axis=1)


def _count_bound(T: np.ndarray, limit: float) -> int:
    n = T.shape[0]
    best = 0
    for k in range(1, n + 1):
        g = _row_bound(T, k)
        if np.sort(g)[:k].sum() <= limit + TOL:
            best = k
        else:
            break
    return best


def _value_unit(values) -> float:
    """Largest ``u`` with every value an integer multiple of it (0 if none is found)."""
    scaled = [v * 1e6 for v in values]
    if not scaled or any(abs(x - round(x)) > 1e-6 for x in scaled):
        return 0.0
    g = 0
    for x in scaled:
        g = math.gcd(g, int(round(x)))
    return g / 1e6


def search_block(instance, plan, scenario, reqs: list[int], vehs: list[int],
                 node_limit: int | None = None) -> tuple[dict[int, int], bool]:
    """Best ``{request index: vehicle}`` map found and whether it is proven optimal.

    With a finite ``node_limit`` the search stops after that many nodes and
    returns its incumbent, which is then not necessarily optimal.
    """
    R = scenario.requests
    cap = instance.fleet.capacity
    modes = instance.detour_modes
    routes = [instance.route(plan.routes[v]) for v in vehs]
    nv = len(vehs)

    cost = [R[i].adhoc_cost for i in reqs]
    order = sorted(range(len(reqs)), key=lambda a: (-cost[a], R[reqs[a]].origin_detour
                                                     + R[reqs[a]].dest_detour, a))
    n = len(order)
    req = [reqs[a] for a in order]
    val = np.array([cost[a] for a in order], dtype=float)
    cand = np.zeros((n, nv), dtype=np.bool_)
    segA = np.zeros((n, nv), dtype=np.int64)
    segB = np.zeros((n, nv), dtype=np.int64)
    for p, i in enumerate(req):
        for k, route in enumerate(routes):
            seg = route.segment(R[i].od)
            if seg is not None:
                cand[p, k] = True
                segA[p, k], segB[p, k] = seg

    # zones relevant to the block, with matrices re-indexed to the search order
    zones: list[_Zone] = []
    for zid in dict.fromkeys(z for r in routes for z in r.zone_sequence):
        M = scenario.matrices[zid]
        members = [p for p, i in enumerate(req) if zid in (R[i].origin, R[i].dest)]
        if not members:
            continue
        rows = [M.index(R[req[p]].id) for p in members]
        T = M.matrix[np.ix_(rows, rows)]
        lim = instance.zone(zid).max_detour if "zone" in modes else math.inf
        zones.append(_Zone(zid, lim, T, members, {p: a for a, p in enumerate(members)}))
    zindex = {Z.zid: zi for zi, Z in enumerate(zones)}
    nz = len(zones)
    maxr = max((len(Z.members) for Z in zones), default=1)

    tz = np.full((n, 2), -1, dtype=np.int64)
    trow = np.zeros((n, 2), dtype=np.int64)
    for p, i in enumerate(req):
        for t, zid in enumerate(dict.fromkeys((R[i].origin, R[i].dest))):
            if zid in zindex:
                tz[p, t] = zindex[zid]
                trow[p, t] = zones[zindex[zid]].local[p]

    Tz = np.zeros((nz, maxr, maxr))
    Tdiag = np.zeros((nz, maxr))
    prefix = np.zeros((nz, maxr, maxr + 1))
    zsize = np.zeros(nz, dtype=np.int64)
    zmem = np.zeros((nz, maxr), dtype=np.int64)
    limit = np.zeros(nz)
    for zi, Z in enumerate(zones):
        r = len(Z.members)
        Tz[zi, :r, :r] = Z.T
        Tdiag[zi, :r] = np.diag(Z.T)
        off = Z.T.copy()
        np.fill_diagonal(off, 0.0)
        prefix[zi, :r, 1:r + 1] = np.cumsum(np.sort(off, axis=1), axis=1)
        zsize[zi] = r
        zmem[zi, :r] = Z.members
        limit[zi] = Z.limit

    # per vehicle and zone: max request count and drift suffixes
    has = np.zeros((nv, nz), dtype=np.bool_)
    kcap = np.zeros((nv, nz), dtype=np.int64)
    candmask = np.zeros((nv, nz, maxr), dtype=np.bool_)
    drift = np.zeros((nv, nz, n + 1))
    for k, route in enumerate(routes):
        for zid in dict.fromkeys(route.zone_sequence):
            if zid not in zindex:
                continue
            zi = zindex[zid]
            Z = zones[zi]
            mine = [a for a, p in enumerate(Z.members) if cand[p, k]]
            if not mine:
                continue
            visits = route.zone_sequence.count(zid)
            kmax = min(len(mine), 2 * cap * visits)
            sub = Z.T[np.ix_(mine, mine)]
            if math.isfinite(Z.limit):
                kmax = min(kmax, max(1, _count_bound(sub, Z.limit)))
            g = np.full(Z.T.shape[0], math.inf)
            g[mine] = _row_bound(sub, kmax)
            # increments of later additions are at least 2 * g - tau
            h = 2.0 * g - np.diag(Z.T)
            neg = np.zeros(n + 1)
            for a in mine:
                neg[Z.members[a]] = max(0.0, -h[a])
            drift[k, zi] = np.concatenate([np.cumsum(neg[::-1])[::-1][1:], [0.0]])
            has[k, zi] = True
            kcap[k, zi] = kmax
            candmask[k, zi, mine] = True
    knapz = np.array([math.isfinite(Z.limit) for Z in zones], dtype=np.bool_) & has.any(axis=0) \
        if nz else np.zeros(0, dtype=np.bool_)

    trip_lim = instance.trip_detour_limit if "trip" in modes else math.inf
    od_rows = []
    if "od" in modes:
        for k, route in enumerate(routes):
            for od in instance.od_set:
                lim = instance.od_limit(od)
                if math.isfinite(lim) and route.traverses(od):
                    zs = [zindex[z] for z in dict.fromkeys(route.zones_between(od))
                          if z in zindex and has[k, zindex[z]]]
                    if zs:
                        od_rows.append((k, zs, lim))
    od_k = np.array([k for k, _, _ in od_rows], dtype=np.int64)
    od_z = np.zeros((len(od_rows), nz), dtype=np.bool_)
    for r, (_, zs, _) in enumerate(od_rows):
        od_z[r, zs] = True
    od_lim = np.array([lim for _, _, lim in od_rows], dtype=float)

    rest = np.concatenate([np.cumsum(val[::-1])[::-1], [0.0]])
    pax = np.array([R[i].passengers for i in req], dtype=np.int64)
    nm = np.array([r.m - 1 for r in routes], dtype=np.int64)
    ident = np.array([[kk < k and plan.routes[vehs[kk]] == plan.routes[vehs[k]]
                       for kk in range(nv)] for k in range(nv)], dtype=np.bool_).reshape(nv, nv)
    best, proven = run_search(n, nv, cap, val, rest, pax, cand, segA, segB, nm, tz, trow, Tz,
                              Tdiag, prefix, zsize, zmem, limit, has, knapz, kcap, candmask,
                              drift, ident, float(trip_lim), od_k, od_z, od_lim, _LAMBDAS,
                              _value_unit(val.tolist()),
                              -1 if node_limit is None else int(node_limit))
    return {req[p]: vehs[int(k)] for p, k in enumerate(best) if k >= 0}, bool(proven)
