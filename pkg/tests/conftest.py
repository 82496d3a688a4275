import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fairfed.data import TabularDataset, builtin_dataset, prepare, SplitSpec

settings.register_profile(
    "fairfed", max_examples=100, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fairfed"))


def make_toy(n=200, d=4, seed=0, p_a=0.6, shift=1.0):
    """Toy data where the label depends on the features and on A."""
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < p_a).astype(np.int64)
    X = rng.normal(size=(n, d))
    logits = X @ np.linspace(1.0, -0.5, d) + shift * (a - 0.5)
    y = (rng.random(n) < 1 / (1 + np.exp(-logits))).astype(np.int64)
    return TabularDataset(X, y, a)


@pytest.fixture
def toy():
    return make_toy()


@pytest.fixture(scope="session")
def data_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(scope="session")
def compas(data_cache):
    path, schema = builtin_dataset("compas")
    return prepare(path, schema, SplitSpec(), data_cache)


@pytest.fixture(scope="session")
def adult(data_cache):
    path, schema = builtin_dataset("adult")
    return prepare(path, schema, SplitSpec(), data_cache)


# one entry per acceptance criterion: (number, passed, detail)
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
