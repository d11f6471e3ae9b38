import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import philox
from flexbus.config import instance_from_dict
from flexbus.oracle import random_micro_instance
from flexbus.phase1 import (P1Infeasible, ReliabilityVector, check_plan, resolve_reliability,
                            solve_p1, solve_p1_resolved)
from flexbus.stochastic import demand_quantile, detour_quantile


def rho3(inst, vol, a, c):
    # components: category AC, zones A, B, C (B is never an endpoint)
    return ReliabilityVector.from_array(inst, [vol, a, 0.0, c])


def test_zero_volume_reliability_gives_empty_plan(small3):
    plan = solve_p1(small3, ReliabilityVector.uniform(small3, 0.0, 0.7))
    assert plan.used == [] and plan.cost == 0.0


def test_resolution_uses_quantiles(small3):
    delta, tau2 = resolve_reliability(small3, rho3(small3, 0.3, 0.25, 0.3))
    assert delta == (demand_quantile(small3.categories[0].volume_dist, 0.3),)
    assert tau2[0] == detour_quantile(small3.zone("A").detour_dist, 0.25)
    assert tau2[2] == detour_quantile(small3.zone("C").detour_dist, 0.3)


def test_resolution_is_monotone(small3):
    lo = resolve_reliability(small3, rho3(small3, 0.2, 0.2, 0.2))
    hi = resolve_reliability(small3, rho3(small3, 0.6, 0.7, 0.2))
    assert all(a <= b for a, b in zip(lo[0], hi[0]))
    assert all(a <= b for a, b in zip(lo[1], hi[1]))


def test_best_region_uses_two_vehicles(small3):
    plan = solve_p1(small3, rho3(small3, 0.3, 0.25, 0.3))
    assert plan.deployment() == (("ABC", 2),) and plan.cost == 20.0
    assert check_plan(small3, plan) == []


def test_second_region_uses_three_vehicles(small3):
    plan = solve_p1(small3, rho3(small3, 0.4, 0.45, 0.4))
    assert plan.deployment() == (("ABC", 3),)


def test_zero_demand_has_zero_cost(small3):
    plan = solve_p1_resolved(small3, [0], [1.0, 1.0, 1.0])
    assert plan.cost == 0.0 and plan.used == []


def test_volume_equal_to_capacity_needs_one_vehicle(small3):
    plan = solve_p1_resolved(small3, [small3.fleet.capacity], [0.0, 0.0, 0.0])
    assert plan.deployment() == (("ABC", 1),) and plan.cost == 10.0


def test_small_fleet_is_infeasible(small3):
    tiny = small3.with_changes(fleet=type(small3.fleet)(1, 12))
    with pytest.raises(P1Infeasible):
        solve_p1_resolved(tiny, [30], [0.5, 0.5, 0.5])


def test_vehicle_relabeling_preserves_cost(small3):
    plan = solve_p1(small3, rho3(small3, 0.5, 0.5, 0.5))
    perm = list(reversed(range(len(plan.routes))))
    moved = plan.permuted(perm)
    assert moved.cost == plan.cost
    assert check_plan(small3, moved) == []
    assert sorted(moved.deployment()) == sorted(plan.deployment())


def _trip_od_instance(modes):
    z = lambda i: {"id": i, "max_detour": 6.0, "curve": {"form": "linear", "a": 0.5, "b": 0.02},
                   "detour_dist": {"kind": "tn", "mu": 1.0, "var": 0.5}}
    return instance_from_dict({
        "schema_version": 1, "zones": [z(i) for i in "ABC"],
        "links": [{"from": "A", "to": "B", "cost": 4.0}, {"from": "B", "to": "C", "cost": 4.0}],
        "routes": "auto",
        "categories": [{"origin": "A", "dest": "C", "passengers": 1,
                        "volume": {"kind": "tn", "mu": 10.0, "var": 4.0}},
                       {"origin": "A", "dest": "B", "passengers": 1,
                        "volume": {"kind": "tn", "mu": 4.0, "var": 1.0}}],
        "fleet": {"size": 8, "capacity": 6}, "detour_modes": modes,
        "trip_detour_limit": 7.0, "od_detour_limits": [{"od": ["A", "C"], "limit": 6.5}]})


@pytest.mark.parametrize("modes", [["zone"], ["trip"], ["od"], ["zone", "trip", "od"]])
def test_detour_modes_are_respected(modes):
    inst = _trip_od_instance(modes)
    plan = solve_p1(inst, ReliabilityVector.uniform(inst, 0.6, 0.6))
    assert check_plan(inst, plan) == []


def test_tighter_modes_never_cost_less():
    base = _trip_od_instance(["zone"])
    rho = ReliabilityVector.uniform(base, 0.6, 0.6)
    loose = solve_p1(base, rho).cost
    tight = solve_p1(_trip_od_instance(["zone", "trip", "od"]), rho).cost
    assert tight >= loose - 1e-9


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 31 - 1))
def test_plans_pass_independent_checker(seed):
    rng = philox(seed)
    inst, _ = random_micro_instance(rng)
    dim = len(inst.categories) + len(inst.zones)
    rho = ReliabilityVector.from_array(inst, rng.uniform(0.0, 0.95, dim))
    try:
        plan = solve_p1(inst, rho)
    except P1Infeasible:
        return
    assert check_plan(inst, plan) == []


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 31 - 1))
def test_feasibility_is_monotone(seed):
    rng = philox(seed, 1)
    inst, _ = random_micro_instance(rng)
    dim = len(inst.categories) + len(inst.zones)
    hi = rng.uniform(0.0, 0.95, dim)
    lo = hi * rng.uniform(0.0, 1.0, dim)
    try:
        solve_p1(inst, ReliabilityVector.from_array(inst, hi))
    except P1Infeasible:
        return
    solve_p1(inst, ReliabilityVector.from_array(inst, lo))


def test_decomposed_and_monolithic_agree(fivezone):
    rho = ReliabilityVector.uniform(fivezone, 0.5, 0.5)
    a = solve_p1(fivezone, rho, decompose=True)
    b = solve_p1(fivezone, rho, decompose=False)
    assert a.cost == pytest.approx(b.cost, abs=1e-6)
    assert check_plan(fivezone, a) == [] and check_plan(fivezone, b) == []


def test_solver_backends_agree(small3):
    delta, tau2 = resolve_reliability(small3, rho3(small3, 0.6, 0.5, 0.5))
    assert solve_p1_resolved(small3, delta, tau2, backend="bnb").cost == \
        solve_p1_resolved(small3, delta, tau2, backend="highs").cost


def test_cache_returns_same_plan(small3):
    cache = {}
    rho = rho3(small3, 0.45, 0.3, 0.3)
    a = solve_p1(small3, rho, cache=cache)
    b = solve_p1(small3, rho, cache=cache)
    assert a.cost == b.cost and a.routes == b.routes and cache
    assert np.isclose(a.cost, solve_p1(small3, rho).cost)
