from pathlib import Path

import hypothesis
import numpy as np
import pytest

from engageformer import numerics as nx
from engageformer.training import toy_config

hypothesis.settings.register_profile("default", deadline=None)
hypothesis.settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


@pytest.fixture
def f64():
    with nx.precision("float64"):
        yield


@pytest.fixture
def toy():
    return toy_config()


def fd_max_rel_error(build, arrays, seed=0, h=1e-5, floor=1e-6):
    """Max relative error between backprop and central differences for ``build(*tensors)``.

    The output is reduced to a scalar through a fixed random projection. Runs in
    float64; the numerical side only ever calls ``build`` forward.
    """
    with nx.precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        out_shape = build(*[nx.Tensor(a) for a in arrays]).shape
        proj = np.random.default_rng(seed).normal(size=out_shape)

        def scalar(arrs):
            return float((build(*[nx.Tensor(a) for a in arrs]).data * proj).sum())

        leaves = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
        build(*leaves).backward(proj)
        worst = 0.0
        for k, a in enumerate(arrays):
            analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
            flat = a.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = scalar(arrays)
                flat[i] = keep - h
                down = scalar(arrays)
                flat[i] = keep
                num = (up - down) / (2 * h)
                ana = analytic.reshape(-1)[i]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        return worst


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # lets fixtures see the test outcome during teardown
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)
