import numpy as np
import pytest
from hypothesis import settings

from rateopt import data

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_dataset(labels, groups=None, baseline=None, features=None, catalog=None):
    labels = np.asarray(labels)
    n = labels.size
    if features is None:
        features = np.arange(n, dtype=float).reshape(n, 1)
    if groups is None:
        groups = [frozenset()] * n
    groups = [frozenset([g]) if isinstance(g, str) else frozenset(g) for g in groups]
    if catalog is None:
        catalog = tuple(sorted(set().union(*groups)))
    return data.Dataset(np.asarray(features, dtype=float), labels, tuple(groups), catalog, baseline=baseline)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_groups():
    """12 examples, two groups, labels and baselines mixed within each group."""
    labels = [1, -1, 1, 1, -1, -1, 1, -1, 1, -1, -1, 1]
    groups = ["A"] * 6 + ["B"] * 6
    baseline = [1, 1, -1, 1, -1, 1, -1, -1, 1, 1, -1, -1]
    rs = np.random.default_rng(0)
    return make_dataset(labels, groups, baseline=baseline, features=rs.normal(size=(12, 3)))


_ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
