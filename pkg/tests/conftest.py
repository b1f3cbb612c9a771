import numpy as np
import pytest

from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.nncore import ModelSpec
from sgdlines.trainer import TrainConfig, train


def fd_gradient(f, x, eps=1e-5):
    """Central finite differences of a scalar function of a vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(120, 3, 5, spread=1.0, seed=3)


@pytest.fixture(scope="session")
def small_config():
    spec = ModelSpec((5, 8, 3), "relu", seed=2)
    return TrainConfig(lr=0.1, momentum=0.0, steps=40, plan=BatchPlan(16, seed=4), model=spec,
                       snapshot_stride=10, eval_stride=5, direction_stride=5)


@pytest.fixture(scope="session")
def small_run(blobs, small_config):
    return train(small_config, blobs)


@pytest.fixture(scope="session")
def momentum_run(blobs, small_config):
    cfg = TrainConfig(lr=0.05, momentum=0.9, steps=30, plan=small_config.plan,
                      model=small_config.model, snapshot_stride=10, eval_stride=5)
    return train(cfg, blobs)


# acceptance criteria report their verdicts here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
