from __future__ import annotations

import numpy as np
import pytest

from plapdpp import testfuncs as tf
from plapdpp.core import Params
from plapdpp.dpp import DirichletProblem, solve_bounded
from plapdpp.field import Box

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def test_problem(eps: float, T: float = 0.5, **kw) -> DirichletProblem:
    """The shared 1-d problem: Omega = (-1, 1), p = 3, u0 = g = |x|^(7/2)."""
    prm = Params(1, 3.0, eps)
    f = tf.pos_power(1, 3.0)
    return DirichletProblem(Box((-1.0,), (1.0,)), f, f, T, prm, **kw)


test_problem.__test__ = False


@pytest.fixture(scope="session")
def solution_03():
    return solve_bounded(test_problem(0.3, T=1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
