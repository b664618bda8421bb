import numpy as np
import pandas as pd
import pytest

from jointpp.domain import DesignSpec, ModelParams, assemble_dataset
from jointpp.reduced_rank import KnotSet


def random_instance(rng, n_s=None, n_x=None, n_u=None, n_xs=None, n_v=None, balanced=True):
    """Small random dataset, knots and parameters for oracle comparisons."""
    n_s = n_s or int(rng.integers(4, 16))
    n_x = n_x or int(rng.integers(2, 7))
    locs = rng.uniform(0, 3, size=(n_s, 2))
    heights = np.sort(rng.uniform(0, 4, size=n_x))
    rows = []
    for j in range(n_s):
        ks = range(n_x) if balanced else sorted(rng.choice(n_x, size=max(1, n_x - 1), replace=False))
        for k in ks:
            rows.append((locs[j, 0], locs[j, 1], heights[k], rng.normal()))
    signals = pd.DataFrame(rows, columns=["s1", "s2", "x", "z"])
    plots = pd.DataFrame({"s1": locs[:, 0], "s2": locs[:, 1], "y": rng.normal(size=n_s), "cov1": rng.normal(size=n_s)})
    design = DesignSpec.parse("1+cov1", "1")
    data = assemble_dataset(plots, signals, design, max_height=4.0)
    n_u = n_u or int(rng.integers(2, min(8, n_s) + 1))
    n_xs = n_xs or int(rng.integers(1, min(3, n_x) + 1))
    n_v = n_v or int(rng.integers(2, min(10, n_s) + 1))
    knots = KnotSet(
        rng.uniform(0, 3, size=(n_u, 2)),
        rng.uniform(0, 3, size=(n_v, 2)),
        np.sort(rng.uniform(0, 4, size=n_xs)),
    )
    params = random_params(rng, data.n_x, n_xs, data.p_y, data.p_z)
    return data, knots, params


def random_params(rng, n_x, n_alpha, p_y, p_z):
    return ModelParams(
        sigma2_u=rng.uniform(0.5, 2.0),
        a=rng.uniform(0.5, 3.0),
        gamma=rng.uniform(0.1, 0.9),
        c=rng.uniform(0.5, 2.0),
        sigma2_v=rng.uniform(0.5, 2.0),
        phi_v=rng.uniform(0.5, 2.0),
        tau2_y=rng.uniform(0.1, 0.5),
        tau2_z=rng.uniform(0.1, 0.5, size=n_x),
        alpha=rng.normal(size=n_alpha),
        beta_y=rng.normal(size=p_y),
        beta_z=rng.normal(size=p_z),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_instance():
    return random_instance(np.random.default_rng(5), n_s=8, n_x=4, n_u=4, n_xs=2, n_v=5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
