import sys

import numpy as np
import pytest

from rieszlab.riesz import RieszParams, build_table


@pytest.fixture(scope="session")
def table_factory():
    cache = {}

    def make(d, s, grid=None, cutoff=0.125):
        grid = grid or 256
        key = (d, float(s), grid, cutoff)
        if key not in cache:
            cache[key] = build_table(RieszParams(d, s), grid, cutoff)
        return cache[key]

    return make


@pytest.fixture(scope="session")
def log_table(table_factory):
    return table_factory(1, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
