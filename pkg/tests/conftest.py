import numpy as np
import pytest

from ddlspg.decomp import build_decomposition
from ddlspg.mesh_fom import heat_problem
from ddlspg.training import TrainingPlan, run_top_down

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def heat_coarse():
    """40x40 heat mesh, 2x2 split, top-down snapshots on a 20x20 parameter grid."""
    p = heat_problem(40, 40)
    d = build_decomposition(p, (2, 2))
    store = run_top_down(TrainingPlan(p, grid=(20, 20)))
    return p, d, store


@pytest.fixture(scope="session")
def heat_small():
    """20x20 heat mesh, 2x2 split, snapshots on a 6x6 grid (fast unit-test setting)."""
    p = heat_problem(20, 20)
    d = build_decomposition(p, (2, 2))
    store = run_top_down(TrainingPlan(p, grid=(6, 6)))
    return p, d, store


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(number, name, passed, detail):
        ACCEPTANCE_LINES.append((number, name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
