"""Compiled depth-first search used by :mod:`flexbus._p2search`.

All block data arrives as flat arrays; see ``search_block`` for their
layout.  Vehicle ``k`` and zone ``z`` are block-local indices and ``p`` is a
request position in search order (values are non-increasing in ``p``).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TOL = 1e-9


@njit(cache=True)
def _max_fit(E, rows, J, room):
    # largest j whose j smallest entries of column j - 1 fit in room (not monotone in j)
    if J > rows:
        J = rows
    best = 0
    for c in range(J):
        col = np.sort(E[:rows, c])
        s = 0.0
        for i in range(c + 1):
            s += col[i]
        if s <= room:
            best = c + 1
    return best


@njit(cache=True)
def _slots(pos, k, z, Tdiag, prefix, zsize, zmem, candmask, kcap, limit, D, S, E):
    r = 0
    room = limit[z] - D[k, z] + TOL
    J = kcap[k, z]
    for a in range(zsize[z]):
        if candmask[k, z, a] and zmem[z, a] >= pos:
            r += 1
    if r == 0:
        return 0
    if J > r:
        J = r
    i = 0
    for a in range(zsize[z]):
        if candmask[k, z, a] and zmem[z, a] >= pos:
            b = Tdiag[z, a] + 2.0 * S[k, z, a]
            for c in range(J):
                E[i, c] = b + prefix[z, a, c]
            i += 1
    return _max_fit(E, r, J, room)


@njit(cache=True)
def _joint_slots(pos, k, n, cand, has, knapz, sl, tz, trow, Tdiag, prefix, zsize, limit,
                 D, S, lams, nlam, E):
    nz = has.shape[1]
    mine = 0
    for p in range(pos, n):
        if cand[p, k]:
            mine += 1
    top = mine
    nzs = 0
    for z in range(nz):
        if not (has[k, z] and knapz[z]):
            continue
        nzs += 1
        other = 0
        for p in range(pos, n):
            if cand[p, k] and tz[p, 0] != z and tz[p, 1] != z:
                other += 1
        if sl[k, z] + other < top:
            top = sl[k, z] + other
    if nzs < 2 or top == 0:
        return top
    for z in range(nz):
        if has[k, z] and knapz[z] and limit[z] - D[k, z] + TOL <= 0.0:
            return 0
    best_j = top
    li = 0 if nzs == 2 else 3
    lend = 3 if nzs == 2 else 4
    for L in range(li, lend):
        for i in range(mine):
            for c in range(best_j):
                E[i, c] = 0.0
        zi = 0
        for z in range(nz):
            if not (has[k, z] and knapz[z]):
                continue
            lam = lams[L, zi] if nzs == 2 else 1.0 / nzs
            zi += 1
            room = limit[z] - D[k, z] + TOL
            i = 0
            for p in range(pos, n):
                if not cand[p, k]:
                    continue
                a = -1
                if tz[p, 0] == z:
                    a = trow[p, 0]
                elif tz[p, 1] == z:
                    a = trow[p, 1]
                if a >= 0:
                    b = Tdiag[z, a] + 2.0 * S[k, z, a]
                    for c in range(best_j):
                        cc = c if c < zsize[z] else zsize[z]
                        E[i, c] += lam * (b + prefix[z, a, cc]) / room
                i += 1
        j = _max_fit(E, mine, best_j, 1.0)
        if j < best_j:
            best_j = j
        if best_j == 0:
            break
    return best_j


@njit(cache=True)
def _bound(pos, n, nv, val, rest, cand, has, knapz, anyknap, tz, trow, Tdiag, prefix, zsize,
           zmem, candmask, kcap, limit, D, S, lams, unit, sl, E):
    ub = rest[pos]
    if not anyknap:
        return ub
    nz = has.shape[1]
    for z in range(nz):
        if not knapz[z]:
            continue
        total = 0
        for k in range(nv):
            if has[k, z]:
                sl[k, z] = _slots(pos, k, z, Tdiag, prefix, zsize, zmem, candmask, kcap, limit,
                                  D, S, E)
                total += sl[k, z]
        # members are in position order, so their values are already sorted
        seen = 0
        lost = 0.0
        for a in range(zsize[z]):
            p = zmem[z, a]
            if p >= pos:
                seen += 1
                if seen > total:
                    lost += val[p]
        if lost > 0.0 and rest[pos] - lost < ub:
            ub = rest[pos] - lost
    per = 0.0
    for k in range(nv):
        j = _joint_slots(pos, k, n, cand, has, knapz, sl, tz, trow, Tdiag, prefix, zsize, limit,
                         D, S, lams, 0, E)
        got = 0
        for p in range(pos, n):
            if got >= j:
                break
            if cand[p, k]:
                per += val[p]
                got += 1
        if per >= ub:
            break
    if per < ub:
        ub = per
    if unit > 0.0:
        ub = math.floor(ub / unit + 1e-7) * unit
    return ub


@njit(cache=True)
def _fits(p, k, cap, pax, segA, segB, load, tz, trow, Tdiag, S, D, drift, limit, has,
          trip_lim, od_k, od_z, od_lim, inc):
    for x in range(segA[p, k], segB[p, k]):
        if load[k, x] + pax[p] > cap:
            return False
    inc[0] = 0.0
    inc[1] = 0.0
    for t in range(2):
        z = tz[p, t]
        if z < 0:
            continue
        a = trow[p, t]
        d = Tdiag[z, a] + 2.0 * S[k, z, a]
        if D[k, z] + d - drift[k, z, p] > limit[z] + TOL:
            return False
        inc[t] = d
    nz = has.shape[1]
    if trip_lim < math.inf:
        tot = 0.0
        for z in range(nz):
            if has[k, z]:
                tot += D[k, z] - drift[k, z, p]
                if tz[p, 0] == z:
                    tot += inc[0]
                if tz[p, 1] == z:
                    tot += inc[1]
        if tot > trip_lim + TOL:
            return False
    for r in range(od_k.shape[0]):
        if od_k[r] != k:
            continue
        tot = 0.0
        for z in range(nz):
            if od_z[r, z]:
                tot += D[k, z] - drift[k, z, p]
                if tz[p, 0] == z:
                    tot += inc[0]
                if tz[p, 1] == z:
                    tot += inc[1]
        if tot > od_lim[r] + TOL:
            return False
    return True


@njit(cache=True)
def _apply(p, k, sign, pax, segA, segB, load, tz, trow, Tz, zsize, D, S, count, inc):
    for x in range(segA[p, k], segB[p, k]):
        load[k, x] += sign * pax[p]
    for t in range(2):
        z = tz[p, t]
        if z < 0:
            continue
        a = trow[p, t]
        D[k, z] += sign * inc[t]
        for b in range(zsize[z]):
            S[k, z, b] += sign * Tz[z, b, a]
    count[k] += sign


@njit(cache=True)
def _leaf_ok(nv, has, limit, D, trip_lim, od_k, od_z, od_lim):
    nz = has.shape[1]
    for k in range(nv):
        tot = 0.0
        for z in range(nz):
            if has[k, z]:
                if D[k, z] > limit[z] + TOL:
                    return False
                tot += D[k, z]
        if tot > trip_lim + TOL:
            return False
    for r in range(od_k.shape[0]):
        tot = 0.0
        for z in range(nz):
            if od_z[r, z]:
                tot += D[od_k[r], z]
        if tot > od_lim[r] + TOL:
            return False
    return True


@njit(cache=True)
def run_search(n, nv, cap, val, rest, pax, cand, segA, segB, nm, tz, trow, Tz, Tdiag, prefix,
               zsize, zmem, limit, has, knapz, kcap, candmask, drift, ident, trip_lim, od_k,
               od_z, od_lim, lams, unit, node_limit):
    """Return ``(assignment, proven)``; ``assignment[p]`` is a vehicle or -1."""
    nz = has.shape[1]
    maxr = Tz.shape[1]
    D = np.zeros((nv, nz))
    S = np.zeros((nv, nz, maxr))
    load = np.zeros((nv, max(1, nm.max())), dtype=np.int64)
    count = np.zeros(nv, dtype=np.int64)
    assign = np.full(n, -1, dtype=np.int64)
    incs = np.zeros((n + 1, 2))
    sl = np.zeros((nv, nz), dtype=np.int64)
    E = np.zeros((max(1, n), max(1, n, maxr)))
    anyknap = False
    for z in range(nz):
        if knapz[z]:
            anyknap = True

    best_val = 0.0
    best = np.full(n, -1, dtype=np.int64)

    # strict first fit seeds the incumbent
    greedy = 0.0
    for p in range(n):
        for k in range(nv):
            if not cand[p, k]:
                continue
            if not _fits(p, k, cap, pax, segA, segB, load, tz, trow, Tdiag, S, D, drift, limit,
                         has, trip_lim, od_k, od_z, od_lim, incs[p]):
                continue
            _apply(p, k, 1, pax, segA, segB, load, tz, trow, Tz, zsize, D, S, count, incs[p])
            if _leaf_ok(nv, has, limit, D, trip_lim, od_k, od_z, od_lim):
                assign[p] = k
                greedy += val[p]
                break
            _apply(p, k, -1, pax, segA, segB, load, tz, trow, Tz, zsize, D, S, count, incs[p])
    if greedy > best_val:
        best_val = greedy
        best[:] = assign
    for p in range(n - 1, -1, -1):
        if assign[p] >= 0:
            _apply(p, assign[p], -1, pax, segA, segB, load, tz, trow, Tz, zsize, D, S, count,
                   incs[p])
            assign[p] = -1

    opt = np.zeros(n + 1, dtype=np.int64)
    nodes = 0
    pos = 0
    got = 0.0
    entering = True
    proven = True
    while True:
        if entering:
            entering = False
            nodes += 1
            if node_limit >= 0 and nodes > node_limit:
                proven = False
                break
            prune = False
            if pos == n:
                if got > best_val + TOL and _leaf_ok(nv, has, limit, D, trip_lim, od_k, od_z,
                                                     od_lim):
                    best_val = got
                    best[:] = assign
                prune = True
            else:
                ub = _bound(pos, n, nv, val, rest, cand, has, knapz, anyknap, tz, trow, Tdiag,
                            prefix, zsize, zmem, candmask, kcap, limit, D, S, lams, unit, sl, E)
                if got + ub <= best_val + TOL * max(1.0, abs(best_val)):
                    prune = True
            if prune:
                if pos == 0:
                    break
                pos -= 1
                if assign[pos] >= 0:
                    _apply(pos, assign[pos], -1, pax, segA, segB, load, tz, trow, Tz, zsize, D, S,
                           count, incs[pos])
                    got -= val[pos]
                    assign[pos] = -1
                continue
            opt[pos] = 0
        moved = False
        while opt[pos] < nv:
            k = opt[pos]
            opt[pos] += 1
            if not cand[pos, k]:
                continue
            if count[k] == 0:
                twin = False
                for kk in range(k):
                    if ident[k, kk] and count[kk] == 0:
                        twin = True
                        break
                if twin:
                    continue
            if not _fits(pos, k, cap, pax, segA, segB, load, tz, trow, Tdiag, S, D, drift, limit,
                         has, trip_lim, od_k, od_z, od_lim, incs[pos]):
                continue
            _apply(pos, k, 1, pax, segA, segB, load, tz, trow, Tz, zsize, D, S, count, incs[pos])
            assign[pos] = k
            got += val[pos]
            pos += 1
            entering = True
            moved = True
            break
        if moved:
            continue
        if opt[pos] == nv:
            opt[pos] = nv + 1
            assign[pos] = -1
            pos += 1
            entering = True
            continue
        if pos == 0:
            break
        pos -= 1
        if assign[pos] >= 0:
            _apply(pos, assign[pos], -1, pax, segA, segB, load, tz, trow, Tz, zsize, D, S, count,
                   incs[pos])
            got -= val[pos]
            assign[pos] = -1
    return best, proven
