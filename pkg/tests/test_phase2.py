import dataclasses

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import p2_case, philox
from flexbus.oracle import check_p0, random_micro_instance
from flexbus.phase1 import Plan, ReliabilityVector, P1Infeasible, plan_from_deployment, solve_p1
from flexbus.phase2 import (Assignment, brute_force_p2, check_assignment, evaluate, solve_p2)
from flexbus.stochastic import Scenario, sample_scenarios


def _abc(inst):
    return plan_from_deployment(inst, {"ABC": 1})


@pytest.mark.parametrize("method", ["search", "milp"])
def test_fixture_generous_serves_everyone(appendix_generous, method):
    inst, sc = appendix_generous
    plan = _abc(inst)
    a = solve_p2(inst, plan, sc, method=method)
    assert a.cost == 0.0 and a.served == [0, 1, 2, 3]
    assert plan.cost + a.cost == 10.0


@pytest.mark.parametrize("method", ["search", "milp"])
def test_fixture_tight_sends_request_three_ad_hoc(appendix_tight, method):
    inst, sc = appendix_tight
    plan = _abc(inst)
    a = solve_p2(inst, plan, sc, method=method)
    assert tuple(int(v is not None) for v in a.vehicle) == (1, 1, 0, 1)
    assert a.cost == 3.0 and plan.cost + a.cost == 13.0
    assert check_assignment(inst, plan, sc, a) == []


def test_empty_scenario_costs_nothing(appendix_generous):
    inst, sc = appendix_generous
    empty = Scenario(5, 1.0, (), {})
    assert solve_p2(inst, _abc(inst), empty).cost == 0.0


def test_no_vehicles_means_all_ad_hoc(appendix_generous):
    inst, sc = appendix_generous
    a = solve_p2(inst, plan_from_deployment(inst, {}), sc)
    assert a.cost == sum(r.adhoc_cost for r in sc.requests) == 17.0


def test_checker_flags_overload(appendix_tight):
    inst, sc = appendix_tight
    everyone = Assignment((0, 0, 0, 0), 0.0)
    assert check_assignment(inst, _abc(inst), sc, everyone)


def test_single_scenario_expectation_equals_its_cost(appendix_tight):
    inst, sc = appendix_tight
    rep = evaluate(inst, _abc(inst), [sc])
    assert rep.expected_adhoc == 3.0 and rep.total == 13.0


def test_expectation_is_probability_weighted(appendix_generous):
    inst, sc = appendix_generous
    none = plan_from_deployment(inst, {})
    costly = dataclasses.replace(sc, id=1, probability=0.3)
    free = Scenario(2, 0.7, (), {})
    rep = evaluate(inst, none, [costly, free])
    assert rep.expected_adhoc == pytest.approx(0.3 * 17.0)


def test_evaluate_rejects_bad_probabilities(appendix_generous):
    inst, sc = appendix_generous
    with pytest.raises(ValueError):
        evaluate(inst, _abc(inst), [dataclasses.replace(sc, probability=0.5)])


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 31 - 1))
def test_search_and_milp_match_brute_force(seed):
    inst, plan, sc = p2_case(seed)
    if sc is None:
        return
    best = brute_force_p2(inst, plan, sc)
    a = solve_p2(inst, plan, sc, method="search", node_limit=None)
    assert a.proven and a.cost == pytest.approx(best, abs=1e-9)
    assert check_assignment(inst, plan, sc, a) == []
    for form in ("compact", "product"):
        m = solve_p2(inst, plan, sc, method="milp", formulation=form)
        assert m.cost == pytest.approx(best, abs=1e-9)
        assert check_assignment(inst, plan, sc, m) == []


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 31 - 1))
def test_extra_vehicle_never_raises_ad_hoc_cost(seed):
    inst, plan, sc = p2_case(seed)
    if sc is None or len(plan.used) == inst.fleet.size:
        return
    base = solve_p2(inst, plan, sc, node_limit=None).cost
    for r in inst.routes:
        routes = list(plan.routes)
        routes[routes.index(None)] = r.id
        bigger = Plan(tuple(routes), {}, plan.cost + inst.route_cost(r))
        assert solve_p2(inst, bigger, sc, node_limit=None).cost <= base + 1e-9


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 31 - 1))
def test_two_phase_solutions_are_two_stage_feasible(seed):
    rng = philox(seed, 4)
    inst, scs = random_micro_instance(rng)
    dim = len(inst.categories) + len(inst.zones)
    try:
        plan = solve_p1(inst, ReliabilityVector.from_array(inst, rng.uniform(0, 0.9, dim)))
    except P1Infeasible:
        return
    for sc in scs:
        assert check_p0(inst, plan, sc, solve_p2(inst, plan, sc)) == []


def test_cache_reuses_block_solutions(small3):
    plan = plan_from_deployment(small3, {"ABC": 2})
    scs = sample_scenarios(small3, 4, 3)
    cache = {}
    first = [solve_p2(small3, plan, s, cache=cache).cost for s in scs]
    size = len(cache)
    again = [solve_p2(small3, plan, s, cache=cache).cost for s in scs]
    assert first == again and len(cache) == size


def test_evaluate_reports_service_statistics(small3):
    plan = plan_from_deployment(small3, {"ABC": 2})
    rep = evaluate(small3, plan, sample_scenarios(small3, 10, 0))
    assert rep.fixed_cost == 20.0 and rep.vehicles_used == 2
    assert 0.0 <= rep.service_rate <= 1.0 and 0.0 <= rep.occupancy <= 1.0
    assert rep.total == pytest.approx(rep.fixed_cost + rep.expected_adhoc)
    assert set(rep.to_dict()) >= {"C_f", "Q_bar", "C_total", "occupancy"}
