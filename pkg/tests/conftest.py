import json

import numpy as np
import pytest

from gridgame import fixture_path
from gridgame.attack import classify_meters
from gridgame.grid_model import (
    build_estimator,
    build_jacobian,
    line_sensitivity,
    load_case,
)

TARGET_LINE = (2, 3)


@pytest.fixture(scope="session")
def pjm5():
    case, meters = load_case(fixture_path("pjm5.json"))
    return case, meters


@pytest.fixture(scope="session")
def pjm5_model(pjm5):
    case, meters = pjm5
    H = build_jacobian(case, meters)
    return build_estimator(H, np.ones(H.shape[0]))


@pytest.fixture(scope="session")
def pjm5_sensitivity(pjm5, pjm5_model):
    case, _ = pjm5
    return line_sensitivity(pjm5_model, case, TARGET_LINE)


@pytest.fixture(scope="session")
def pjm5_partition(pjm5_sensitivity):
    return classify_meters(pjm5_sensitivity)


def two_bus_case_dict(reactance=0.1):
    return {
        "base_mva": 1.0,
        "slack_bus": 1,
        "buses": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}],
        "branches": [{"from": 1, "to": 2, "reactance_pu": reactance}],
        "meters": [{"kind": "line_flow", "ref": 0, "label": "z1"}],
    }


@pytest.fixture
def two_bus_file(tmp_path):
    def write(case_dict):
        p = tmp_path / "case.json"
        p.write_text(json.dumps(case_dict))
        return p

    return write


def random_connected_case(rng, n_buses=None):
    """Random connected case with all line flows plus a few injections metered."""
    from gridgame.grid_model import Branch, Bus, GridCase, Meter, MeterSet

    n = n_buses or int(rng.integers(3, 8))
    buses = tuple(Bus(id=i + 1, name=f"b{i + 1}") for i in range(n))
    edges = set()
    order = rng.permutation(n) + 1
    for a, b in zip(order[:-1], order[1:]):  # random spanning tree
        edges.add((min(a, b), max(a, b)))
    extra = int(rng.integers(0, n))
    for _ in range(extra):
        a, b = rng.choice(n, size=2, replace=False) + 1
        edges.add((min(a, b), max(a, b)))
    branches = tuple(
        Branch(from_bus=int(a), to_bus=int(b), reactance_pu=float(rng.uniform(0.01, 0.5)))
        for a, b in sorted(edges)
    )
    case = GridCase(buses=buses, branches=branches, slack_bus=1, base_mva=100.0)
    meters = [Meter(kind="line_flow", ref=k, label=f"z{k + 1}") for k in range(len(branches))]
    n_inj = int(rng.integers(1, n))
    for i, bus in enumerate(rng.choice(n, size=n_inj, replace=False) + 1):
        meters.append(
            Meter(kind="bus_injection", ref=int(bus), label=f"z{len(branches) + i + 1}")
        )
    return case, MeterSet(meters=tuple(meters))


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and "test_acceptance" in item.nodeid:
        name = item.name
        if name.startswith("test_criterion"):
            ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ACCEPTANCE_RESULTS[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
