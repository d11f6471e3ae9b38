import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexbus.detour import (BoundaryDetourCurve, DetourError, InvalidCurveError,
                            build_detour_matrix, eq13_holds, fit_boundary_curve, fit_exponential,
                            max_cut, phase1_detour, sample_boundary_detours, tangent_cuts,
                            zonal_detour)

TABLE3_A = BoundaryDetourCurve.exponential(0.6, 1 / 12)


def test_zonal_detour_fixture(appendix_generous):
    _, sc = appendix_generous
    assert zonal_detour(sc.matrices["A"], [1, 1, 1, 0]) == pytest.approx(4.2, abs=1e-12)
    assert zonal_detour(sc.matrices["C"], [1, 1, 0, 1]) == pytest.approx(3.1, abs=1e-12)
    assert zonal_detour(sc.matrices["B"], [0, 0, 0, 0]) == 0.0


def test_zonal_detour_shape_check(appendix_generous):
    with pytest.raises(DetourError):
        zonal_detour(appendix_generous[1].matrices["A"], [1, 1])


def test_rule_a_reduction():
    T = build_detour_matrix([1.5, 1.0], cap=12, rule="A")
    assert T.matrix[0, 1] == pytest.approx(-1.0 / 24)
    assert T.matrix[0, 0] == 1.5


def test_single_request_matrix():
    T = build_detour_matrix([0.8], cap=5)
    assert T.matrix.shape == (1, 1) and T.matrix[0, 0] == 0.8


def test_rule_b_coincident_points():
    T = build_detour_matrix([1.0, 2.0], cap=1, rule="B", coords=[(0, 0), (0, 0)],
                            max_distance=100.0)
    # raw reduction is -min(1, 2) = -1; the row-1 bound 2*1 > 1 forces scaling by 0.5
    assert T.matrix[0, 1] == pytest.approx(-0.5)
    assert eq13_holds(T.matrix, 1)


def test_rule_b_far_points_have_no_reduction():
    T = build_detour_matrix([1.0, 2.0], cap=3, rule="B", coords=[(0, 0), (500, 0)],
                            max_distance=100.0)
    assert T.matrix[0, 1] == 0.0


def test_rule_b_needs_coordinates():
    with pytest.raises(DetourError):
        build_detour_matrix([1.0, 2.0], cap=3, rule="B")


def test_phase1_detour_examples():
    lin = BoundaryDetourCurve.linear(0.7, 0.03)
    assert phase1_detour(1, lin, 0.9) == pytest.approx(1.34)
    assert phase1_detour(0, lin, 5.0) == 0.0
    assert phase1_detour(2, TABLE3_A, 1.5) == pytest.approx(2 * 0.6 * math.exp(-1 / 6) + 1.5)
    assert phase1_detour(2, TABLE3_A, 1.5) == pytest.approx(2.51578, abs=1e-5)


def test_tangent_cuts_linear_collapse():
    for s, b in tangent_cuts(BoundaryDetourCurve.linear(0.7, 0.03), cap=12):
        assert s == pytest.approx(-0.03) and b == pytest.approx(0.7)


def test_tangent_cut_first_chord():
    s, b = tangent_cuts(TABLE3_A, cap=12)[0]
    assert s == pytest.approx(0.6 * (math.exp(-1 / 12) - 1), abs=1e-12)
    assert s == pytest.approx(-0.047973, abs=1e-6)
    assert b == pytest.approx(0.6, abs=1e-12)


@pytest.mark.parametrize("curve", [BoundaryDetourCurve.linear(0.7, 0.03), TABLE3_A,
                                   BoundaryDetourCurve.exponential(3.0, 0.3, 0.7)])
def test_tangent_cuts_exact_on_integers(curve):
    cuts = tangent_cuts(curve, cap=12)
    for y in range(25):
        assert abs(max_cut(cuts, y) - curve(y)) <= 1e-12


def test_non_convex_curve_rejected():
    bad = BoundaryDetourCurve.table([0, 1, 2, 3], [1.0, 0.9, 0.5, 0.45])
    with pytest.raises(InvalidCurveError):
        tangent_cuts(bad, cap=2)


def test_curve_dict_roundtrip():
    for c in (TABLE3_A, BoundaryDetourCurve.linear(0.7, 0.03),
              BoundaryDetourCurve.table([1, 2, 3], [0.9, 0.6, 0.5])):
        assert BoundaryDetourCurve.from_dict(c.to_dict()) == c


def test_noiseless_fit_recovers_generator():
    x = np.arange(1, 25, dtype=float)
    y = 3.0 * np.exp(-0.3 * x) + 0.7
    (a, b, c), ok, _ = fit_exponential(x, y)
    assert ok
    assert (a, b, c) == pytest.approx((3.0, 0.3, 0.7), abs=1e-6)


def test_boundary_gap_single_point_is_half_width():
    # one point: each axis contributes exactly the side length
    means, ses = sample_boundary_detours((0, 0, 1000, 1000), [1], trials=50, seed=3)
    assert means[0] == pytest.approx(500 * 0.003)


def test_boundary_gap_two_points_matches_order_statistics():
    W = 1000.0
    means, ses = sample_boundary_detours((0, 0, W, W), [2], trials=4000, seed=5)
    # E[W - max] = E[min] = W/3 for two uniforms
    assert abs(means[0] - W / 3 * 0.003) <= 3 * ses[0]


def test_fit_falls_back_to_table_when_degenerate():
    fit = fit_boundary_curve((0, 0, 10, 10), [1, 2], trials=20, seed=0)
    assert not fit.converged and fit.curve.form == "table"


def test_fit_boundary_curve_is_seeded():
    f1 = fit_boundary_curve((0, 0, 800, 800), range(1, 11), trials=200, seed=9)
    f2 = fit_boundary_curve((0, 0, 800, 800), range(1, 11), trials=200, seed=9)
    assert f1.params == f2.params


# -- properties -------------------------------------------------------------------------

def _matrix(data, n, cap, rule):
    tau = data.draw(st.lists(st.floats(0.0, 5.0), min_size=n, max_size=n))
    if rule == "A":
        return build_detour_matrix(tau, cap, "A").matrix
    pts = data.draw(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=n,
                             max_size=n))
    return build_detour_matrix(tau, cap, "B", coords=pts, max_distance=141.5).matrix


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.sampled_from("AB"), st.data())
def test_normalised_matrices_satisfy_bound(n, cap, rule, data):
    assert eq13_holds(_matrix(data, n, cap, rule), cap)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.sampled_from("AB"), st.data())
def test_adding_a_request_never_lowers_detour(n, cap, rule, data):
    T = _matrix(data, n, cap, rule)
    for w in itertools.product((0, 1), repeat=n):
        if sum(w) > cap:
            continue
        base = zonal_detour(T, w)
        for j in range(n):
            if not w[j]:
                more = list(w)
                more[j] = 1
                assert zonal_detour(T, more) >= base - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.data())
def test_zonal_detour_permutation_invariant(n, data):
    T = _matrix(data, n, 3, "A")
    w = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    perm = data.draw(st.permutations(range(n)))
    P = T[np.ix_(perm, perm)]
    assert zonal_detour(P, [w[p] for p in perm]) == pytest.approx(zonal_detour(T, w), abs=1e-12)
