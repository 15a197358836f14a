import numpy as np
import pytest

from flowkl.core import BasisTruncation, FlowEnsemble, FlowSample, Grid
from flowkl.generators import orthonormalize


def random_ensemble(n, m, N, seed=0, domain_length=1.0):
    rng = np.random.default_rng(seed)
    return FlowEnsemble(Grid(n, domain_length), BasisTruncation(m), rng.standard_normal((n * m, N)))


def random_orthonormal_flows(grid, trunc, J, seed=0):
    rng = np.random.default_rng(seed)
    raw = [FlowSample(grid, trunc, rng.standard_normal((grid.n, trunc.m))) for _ in range(J)]
    return orthonormalize(raw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record(number, name, ok, detail=""):
    """Register the outcome of an acceptance criterion for the terminal summary."""
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}  {detail}")
