import functools
import math

import numpy as np
import pytest

from davieslab.builders import build_lattice, build_sierpinski, build_vicsek
from davieslab.heat import spectral_decompose

DF_GASKET = math.log(3) / math.log(2)
DW_GASKET = math.log(5) / math.log(2)


@functools.lru_cache(maxsize=None)
def gasket(level, mu="degree"):
    return build_sierpinski(level, mu)


@functools.lru_cache(maxsize=None)
def gasket_spectral(level):
    return spectral_decompose(gasket(level))


@functools.lru_cache(maxsize=None)
def lattice(dim, side, mu="degree"):
    return build_lattice(dim, side, mu)


@functools.lru_cache(maxsize=None)
def vicsek(level):
    return build_vicsek(level)


def two_vertex(mu=(1.0, 1.0)):
    from davieslab.graph import WeightedGraph

    return WeightedGraph(2, [(0, 1)], mu=np.asarray(mu, float), name="pair")


def path_graph(n, mu="counting"):
    from davieslab.graph import WeightedGraph

    return WeightedGraph(n, [(i, i + 1) for i in range(n - 1)], mu=mu, name=f"path-{n}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        num, title = mark.args
        prev = _CRITERIA.get(num, (title, True))
        _CRITERIA[num] = (title, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {title}")
