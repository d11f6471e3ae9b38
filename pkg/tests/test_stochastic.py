import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize, stats

from flexbus.config import instance_from_dict
from flexbus.stochastic import (Empirical, LogNormal, ReliabilityError, TruncatedNormal,
                                demand_quantile, detour_quantile, distribution_from_dict,
                                reliability_for_volume, sample_scenarios, scaled, volume_cdf)

TN16 = TruncatedNormal(16.0, 6.0)


def test_demand_quantile_examples():
    assert demand_quantile(TN16, 0.5) == 16
    assert demand_quantile(TN16, 0.0) == 0
    assert demand_quantile(Empirical((3, 5), (0.5, 0.5)), 0.6) == 5
    assert demand_quantile(Empirical((3, 5), (0.5, 0.5)), 0.5) == 3


def test_reliability_one_rejected():
    with pytest.raises(ReliabilityError):
        demand_quantile(TN16, 1.0)
    with pytest.raises(ReliabilityError):
        detour_quantile(TN16, -0.1)


def _tn_cdf_by_quadrature(mu, var, x):
    pdf = stats.norm(mu, math.sqrt(var)).pdf
    num = integrate.quad(pdf, 0.0, x, epsabs=1e-13)[0]
    den = integrate.quad(pdf, 0.0, np.inf, epsabs=1e-13)[0]
    return num / den


@pytest.mark.parametrize("rho", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
def test_detour_quantile_matches_quadrature(rho):
    want = optimize.brentq(lambda x: _tn_cdf_by_quadrature(1.5, 1.0, x) - rho, 0.0, 20.0,
                           xtol=1e-12)
    assert detour_quantile(TruncatedNormal(1.5, 1.0), rho) == pytest.approx(want, abs=1e-6)


def test_detour_quantile_inverts_cdf():
    d = TruncatedNormal(1.0, 1.0)
    assert detour_quantile(d, d.cdf(1.0)) == pytest.approx(1.0, abs=1e-12)


def test_lognormal_median():
    assert detour_quantile(LogNormal(0.8, 4.0), 0.5) == pytest.approx(4.0)


def test_reliability_for_volume_round_trip():
    for k in range(1, 30):
        rho = reliability_for_volume(TN16, k)
        assert demand_quantile(TN16, rho) == k
    assert reliability_for_volume(TN16, 0) == 0.0


def test_scaled_laws():
    s = scaled(TN16, 1.5)
    assert (s.mu, s.var) == (24.0, 13.5)
    assert scaled(LogNormal(0.8, 4.0), 2.0).median() == 8.0
    e = scaled(Empirical((1, 2), (0.25, 0.75)), 3.0)
    assert e.values == (3.0, 6.0)
    with pytest.raises(ValueError):
        scaled(TN16, 0.0)


def test_distribution_roundtrip():
    for d in (TN16, TruncatedNormal(1.0, 2.0, 0.0, 9.0), LogNormal(0.8, 4.0),
              Empirical((1.0, 4.0), (0.5, 0.5))):
        back = distribution_from_dict(d.to_dict())
        assert back.cdf(3.0) == pytest.approx(d.cdf(3.0))


def _instance(volume, detour=None):
    return instance_from_dict({
        "schema_version": 1,
        "zones": [{"id": z, "max_detour": 8.0, "curve": {"form": "linear", "a": 0.7, "b": 0.03},
                   "detour_dist": detour or {"kind": "tn", "mu": 1.0, "var": 1.0}} for z in "AB"],
        "links": [{"from": "A", "to": "B", "cost": 5.0}], "routes": "auto",
        "categories": [{"origin": "A", "dest": "B", "passengers": 1, "volume": volume}],
        "fleet": {"size": 3, "capacity": 6}})


def test_scenarios_are_seed_deterministic():
    inst = _instance({"kind": "tn", "mu": 5.0, "var": 2.0})
    a = sample_scenarios(inst, 5, seed=2 ** 63 + 11)
    b = sample_scenarios(inst, 5, seed=2 ** 63 + 11)
    for x, y in zip(a, b):
        assert x.requests == y.requests
        for z in x.matrices:
            np.testing.assert_array_equal(x.matrices[z].matrix, y.matrices[z].matrix)
    c = sample_scenarios(inst, 5, seed=12)
    assert [len(s.requests) for s in a] != [len(s.requests) for s in c] or \
        a[0].requests != c[0].requests


def test_scenario_prefix_is_stable():
    inst = _instance({"kind": "tn", "mu": 5.0, "var": 2.0})
    short, long = sample_scenarios(inst, 3, 4), sample_scenarios(inst, 8, 4)
    assert [s.requests for s in short] == [s.requests for s in long[:3]]


def test_degenerate_law_gives_identical_scenarios():
    inst = _instance({"kind": "empirical", "values": [4], "weights": [1.0]},
                     {"kind": "empirical", "values": [1.5], "weights": [1.0]})
    scs = sample_scenarios(inst, 6, seed=1)
    first = [(r.passengers, r.origin_detour, r.dest_detour) for r in scs[0].requests]
    assert len(first) == 4
    for s in scs[1:]:
        assert [(r.passengers, r.origin_detour, r.dest_detour) for r in s.requests] == first


def test_volume_sample_mean_within_three_standard_errors():
    inst = _instance({"kind": "tn", "mu": 5.0, "var": 3.0})
    law = inst.categories[0].volume_dist
    counts = np.array([len(s.requests) for s in sample_scenarios(inst, 10_000, seed=8)])
    ks = np.arange(0, 60)
    pmf = np.array([volume_cdf(law, k) - volume_cdf(law, k - 1) for k in ks])
    mean = float((ks * pmf).sum())
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - mean) <= 3 * se


# -- properties -------------------------------------------------------------------------

laws = st.one_of(
    st.builds(TruncatedNormal, st.floats(0.0, 30.0), st.floats(0.1, 20.0)),
    st.builds(LogNormal, st.floats(0.1, 1.5), st.floats(0.5, 10.0)),
    st.lists(st.integers(0, 20), min_size=1, max_size=8).map(Empirical.from_samples),
)


@settings(max_examples=150, deadline=None)
@given(laws, st.floats(0.0, 0.999), st.floats(0.0, 0.999))
def test_demand_quantile_monotone(law, r1, r2):
    lo, hi = sorted((r1, r2))
    assert demand_quantile(law, lo) <= demand_quantile(law, hi)


@settings(max_examples=150, deadline=None)
@given(laws, st.floats(0.001, 0.999))
def test_demand_quantile_is_smallest_covering_integer(law, rho):
    k = demand_quantile(law, rho)
    assert volume_cdf(law, k) >= rho
    assert k == 0 or volume_cdf(law, k - 1) < rho


@settings(max_examples=150, deadline=None)
@given(laws, st.floats(0.0, 0.999), st.floats(0.0, 0.999))
def test_detour_quantile_monotone(law, r1, r2):
    lo, hi = sorted((r1, r2))
    assert detour_quantile(law, lo) <= detour_quantile(law, hi) + 1e-12


@settings(max_examples=150, deadline=None)
@given(laws, st.floats(0.0, 40.0))
def test_quantile_of_cdf_does_not_exceed_point(law, x):
    p = float(law.cdf(x))
    if p < 1.0:
        assert detour_quantile(law, p) <= x + 1e-7 * max(1.0, x)
