import sys

import numpy as np
import pytest

from tvvi import (
    GridSpec,
    bingham_problem,
    classify_sets,
    make_solution,
    separable_problem,
    solve_vi_oracle_separable,
)


def scalar_fixture(u, k_rows=1, a=1.0, q=None):
    """Separable problem with its closed-form solution and sets.

    ``q`` defaults to the even split of the slack over the rows.
    """
    prob = separable_problem(a, k_rows, u)
    y = solve_vi_oracle_separable(a, k_rows, u)
    if q is None:
        q = np.full((k_rows, 1), (u - a * y) / k_rows)
    sol = make_solution(prob, [y], q)
    return prob, sol, classify_sets(prob, sol)


def small_bingham(N=8, u0=10.0):
    return bingham_problem(GridSpec(N), u0=u0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.REPORT):
        terminalreporter.write_line(line)
