import sys
import warnings

import numpy as np
import pytest

from reflected_mfg import Model, ModelConfig, TimeGrid, build_grid


def make_model(n_cells=21, **overrides):
    config = ModelConfig(**overrides)
    return Model(config, build_grid(n_cells, (config.domain_lo, config.domain_hi)))


def make_null(n_cells=21, **overrides):
    config = ModelConfig.null(**overrides)
    return Model(config, build_grid(n_cells, (config.domain_lo, config.domain_hi)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model():
    return make_model(21)


@pytest.fixture(scope="session")
def small_time():
    return TimeGrid(0.0, 0.5, 50)


@pytest.fixture(scope="session")
def null_model():
    return make_null(21)


def random_measure(rng, n, atoms=None):
    w = np.zeros(n)
    if atoms is None:
        w = rng.random(n)
    else:
        w[rng.choice(n, size=atoms, replace=False)] = rng.random(atoms)
    return w / w.sum()


@pytest.fixture(autouse=True)
def _quiet_cfl():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="drift CFL number")
        yield


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
