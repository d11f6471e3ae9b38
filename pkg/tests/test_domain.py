import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexbus.config import instance_from_dict
from flexbus.domain import (M1, InstanceError, InvalidRouteError, Route, ServiceRequest,
                            UnreachableODError, build_converting_matrix, decompose_instance,
                            od_load, od_vector, shortest_direct_routes, undirected)
from flexbus.phase1 import ReliabilityVector, solve_p1

OMEGA = (("A", "B"), ("B", "C"), ("A", "C"), ("C", "B"), ("B", "A"), ("C", "A"))


def test_converting_matrix_abc():
    B = build_converting_matrix(Route("ABC", ("A", "B", "C"), 10.0), OMEGA)
    assert B.rows == ("A", "B")
    np.testing.assert_array_equal(B.matrix, [[1, 0, 1, M1, M1, M1], [0, 1, 1, M1, M1, M1]])


def test_converting_matrix_two_zone_route():
    B = build_converting_matrix(Route("AB", ("A", "B"), 3.0), [("A", "B")])
    np.testing.assert_array_equal(B.matrix, [[1.0]])


def test_converting_matrix_interior_od():
    B = build_converting_matrix(Route("ABCD", "ABCD", 9.0), [("A", "D"), ("B", "D")])
    assert B.entry("B", ("B", "D")) == 1
    assert B.entry("C", ("B", "D")) == 1
    assert B.entry("A", ("B", "D")) == 0


def test_od_load_fixture(appendix_generous):
    inst, sc = appendix_generous
    assert od_load([1, 1, 0, 1], sc.requests) == {("A", "C"): 5, ("A", "B"): 0, ("B", "C"): 1}
    assert all(v == 0 for v in od_load([0, 0, 0, 0], sc.requests).values())
    full = od_load([1, 1, 1, 1], sc.requests)
    assert full == {("A", "C"): 5, ("A", "B"): 2, ("B", "C"): 1}
    B = build_converting_matrix(inst.route("ABC"), inst.od_set)
    assert B.load(od_vector(full, inst.od_set))[0] == 7


def test_od_load_length_mismatch(appendix_generous):
    with pytest.raises(ValueError):
        od_load([1, 1], appendix_generous[1].requests)


def _req(i, o, d, n=1):
    return ServiceRequest(str(i), f"{o}{d}", o, d, n, 1.0, 1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(OMEGA[:3]), min_size=1, max_size=4), st.data())
def test_converting_matrix_big_m_iff_off_route(ods, data):
    route = Route("AB", ("A", "B"), 1.0) if data.draw(st.booleans()) else \
        Route("ABC", ("A", "B", "C"), 1.0)
    reqs = [_req(i, *od) for i, od in enumerate(ods)]
    B = build_converting_matrix(route, OMEGA)
    for w in itertools.product((0, 1), repeat=len(reqs)):
        load = B.load(od_vector(od_load(w, reqs), OMEGA))
        has_m = bool(np.any(load >= M1))
        off = any(flag and not route.traverses(r.od) for flag, r in zip(w, reqs))
        assert has_m == off


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(OMEGA), st.integers(1, 3)), min_size=1, max_size=6),
       st.data())
def test_od_load_additive_on_disjoint_supports(spec, data):
    reqs = [_req(i, o, d, n) for i, ((o, d), n) in enumerate(spec)]
    w1 = data.draw(st.lists(st.integers(0, 1), min_size=len(reqs), max_size=len(reqs)))
    w2 = [1 - a if data.draw(st.booleans()) else 0 for a in w1]
    s = [a + b for a, b in zip(w1, w2)]
    l1, l2, ls = od_load(w1, reqs), od_load(w2, reqs), od_load(s, reqs)
    for od in ls:
        assert l1[od] + l2[od] == ls[od]


def test_shortest_route_line():
    links = undirected([("A", "B", 6.0), ("B", "C", 4.0)])
    (r,) = shortest_direct_routes(links, [("A", "C")])
    assert r.zone_sequence == ("A", "B", "C") and r.operating_cost == 10.0
    (r,) = shortest_direct_routes(links, [("A", "B")])
    assert r.zone_sequence == ("A", "B") and r.operating_cost == 6.0


def test_shortest_route_tie_break_is_lexicographic():
    links = undirected([("A", "C", 1.0), ("C", "D", 1.0), ("A", "B", 1.0), ("B", "D", 1.0)])
    (r,) = shortest_direct_routes(links, [("A", "D")])
    assert r.zone_sequence == ("A", "B", "D")


def test_unreachable_od():
    with pytest.raises(UnreachableODError):
        shortest_direct_routes(undirected([("A", "B", 1.0)]), [("A", "C")])


def test_route_validation():
    with pytest.raises(InvalidRouteError):
        Route("A", ("A",), 1.0)
    with pytest.raises(InvalidRouteError):
        Route("AAB", ("A", "A", "B"), 1.0)
    with pytest.raises(InvalidRouteError):
        Route("AB", ("A", "B"), 0.0)


def _zone(z):
    return {"id": z, "max_detour": 8.0, "curve": {"form": "linear", "a": 0.5, "b": 0.02},
            "detour_dist": {"kind": "tn", "mu": 1.0, "var": 0.5}}


def _cat(o, d, mu=4.0):
    return {"origin": o, "dest": d, "passengers": 1, "volume": {"kind": "tn", "mu": mu, "var": 1.0}}


def six_zone():
    doc = {"schema_version": 1, "zones": [_zone(z) for z in "ABCDEF"],
           "links": [{"from": a, "to": b, "cost": 3.0} for a, b in
                     ("AB", "AC", "CD", "DE", "BC", "DF")],
           "routes": [{"id": "AB", "zones": ["A", "B"]}, {"id": "ACDE", "zones": list("ACDE")},
                      {"id": "BCDF", "zones": list("BCDF")}],
           "categories": [_cat("A", "B"), _cat("A", "E"), _cat("C", "D"), _cat("B", "F")],
           "fleet": {"size": 6, "capacity": 5}}
    return instance_from_dict(doc)


def test_decomposition_six_zone():
    parts = decompose_instance(six_zone())
    got = sorted((tuple(r.id for r in p.routes), tuple(c.od for c in p.categories))
                 for p in parts)
    assert got == [(("AB",), (("A", "B"),)),
                   (("ACDE", "BCDF"), (("A", "E"), ("C", "D"), ("B", "F")))]


def test_decomposition_single_component(small3):
    (only,) = decompose_instance(small3)
    assert only.routes == small3.routes and only.categories == small3.categories


def test_decomposition_overlapping_routes():
    doc = {"schema_version": 1, "zones": [_zone(z) for z in "ABC"],
           "links": [{"from": "A", "to": "B", "cost": 2.0}, {"from": "B", "to": "C", "cost": 2.0}],
           "routes": "auto", "categories": [_cat("A", "B"), _cat("A", "C"), _cat("B", "C")],
           "fleet": {"size": 4, "capacity": 5}}
    inst = instance_from_dict(doc)
    (only,) = decompose_instance(inst)
    assert set(only.routes) == set(inst.routes)


def test_decomposition_cost_additive():
    inst = six_zone()
    rho = ReliabilityVector.uniform(inst, 0.6, 0.5)
    whole = solve_p1(inst, rho, decompose=False).cost
    parts = 0.0
    for sub in decompose_instance(inst):
        parts += solve_p1(sub, ReliabilityVector.uniform(sub, 0.6, 0.5), decompose=False).cost
    assert parts == pytest.approx(whole, abs=1e-6)


def test_instance_rejects_unknown_detour_mode():
    doc = {"schema_version": 1, "zones": [_zone("A"), _zone("B")],
           "links": [{"from": "A", "to": "B", "cost": 2.0}], "routes": "auto",
           "categories": [_cat("A", "B")], "fleet": {"size": 1, "capacity": 5},
           "detour_modes": ["nope"]}
    with pytest.raises(InstanceError):
        instance_from_dict(doc)
