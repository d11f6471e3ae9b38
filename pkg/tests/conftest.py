import json

import numpy as np
import pytest

from flexbus.config import bundled, instance_from_dict, load_instance, scenarios_from_dict
from flexbus.domain import Fleet
from flexbus.oracle import random_micro_instance
from flexbus.phase1 import plan_from_deployment
from flexbus.stochastic import sample_scenarios


def appendix(max_detour_a: float = 8.0, cap: int = 7):
    """The four-request fixture with zone A's budget and the capacity overridden."""
    doc = json.loads(bundled("appendix_a").read_text())
    for z in doc["zones"]:
        if z["id"] == "A":
            z["max_detour"] = max_detour_a
    doc["fleet"]["capacity"] = cap
    inst = instance_from_dict(doc)
    return inst, scenarios_from_dict(inst, doc["scenarios"])[0]


def philox(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def p2_case(seed):
    """Micro instance, a plan on at most two vehicles and a scenario of 1 to 8 requests.

    The scenario is None when forty draws all fall outside that size range.
    """
    rng = philox(seed, 3)
    inst, _ = random_micro_instance(rng)
    inst = inst.with_changes(fleet=Fleet(min(2, inst.fleet.size + 1), inst.fleet.capacity))
    sc = None
    for _ in range(40):
        cand = sample_scenarios(inst, 1, int(rng.integers(0, 2 ** 31)))[0]
        if 1 <= len(cand.requests) <= 8:
            sc = cand
            break
    routes = [r.id for r in inst.routes]
    dep: dict[str, int] = {}
    for _ in range(int(rng.integers(1, inst.fleet.size + 1))):
        r = routes[int(rng.integers(len(routes)))]
        dep[r] = dep.get(r, 0) + 1
    return inst, plan_from_deployment(inst, dep), sc


@pytest.fixture
def appendix_generous():
    return appendix(8.0, 7)


@pytest.fixture
def appendix_tight():
    return appendix(4.0, 6)


@pytest.fixture(scope="session")
def small3():
    return load_instance(bundled("small3"))


@pytest.fixture(scope="session")
def fivezone():
    return load_instance(bundled("fivezone"))


_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[n] = (rep.outcome, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, name = _CRITERIA[n]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {name}")
