import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointpp.metrics import (
    coverage_and_width,
    crps,
    crps_gaussian,
    crps_per_target,
    format_report,
    gelfand_ghosh,
    grs,
    parse_report,
    prediction_scores,
    rmspe,
)


def brute_crps(x, y):
    x = np.asarray(x)
    m = x.size
    pair = np.abs(x[:, None] - x[None, :]).sum() / (m * (m - 1))
    return np.mean(np.abs(x - y)) - 0.5 * pair


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(-100, 100))
def test_crps_sorted_identity(x, y):
    assert crps_per_target(np.array(x), y)[0] == pytest.approx(brute_crps(x, y), abs=1e-9)


def test_crps_gaussian_limit():
    rng = np.random.default_rng(0)
    x = rng.normal(1.0, 2.0, size=(200000, 1))
    assert crps(x, 0.3) == pytest.approx(crps_gaussian(1.0, 2.0, 0.3), rel=0.01)


def test_crps_point_mass_is_absolute_error():
    assert crps(np.full((5, 2), 3.0), [1.0, 4.5]) == pytest.approx(3.5)


def test_grs_formula():
    assert grs([0.0, 1.0], [1.0, 4.0], [1.0, 3.0]) == pytest.approx(-np.log(4) - 1 - 1)
    with pytest.raises(ValueError):
        grs([0.0], [0.0], [1.0])


def test_coverage_and_width():
    x = np.tile(np.linspace(0, 1, 1001)[:, None], (1, 4))
    cov, width = coverage_and_width(x, [0.5, 0.01, 0.99, 0.2])
    assert cov == 50.0 and width == pytest.approx(0.95)


def test_gelfand_ghosh():
    R = np.array([[1.0, 2.0], [3.0, 2.0]])
    G, P, D = gelfand_ghosh(R, [2.0, 0.0])
    assert (G, P, D) == pytest.approx((4.0, 1.0, 5.0))


def test_rmspe():
    assert rmspe([1, 2], [1, 4]) == pytest.approx(np.sqrt(2))


def test_prediction_scores_and_report():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(500, 3))
    s = prediction_scores(X, [0.0, 0.5, -0.5], prefix="y_")
    assert set(s) == {"y_rmspe", "y_crps", "y_grs", "y_coverage_pct", "y_width"}
    back = parse_report(format_report({**s, "form": "diag"}))
    assert back["form"] == "diag"
    assert back["y_crps"] == pytest.approx(s["y_crps"], rel=1e-9)


def test_trivial_cases():
    assert rmspe([1.0, 2.0], [1.0, 2.0]) == 0
    assert rmspe([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    assert crps(np.full((10, 3), 2.0), [2.0, 2.0, 2.0]) == 0
    assert grs([1.0, 2.0], [1.0, 1.0], [1.0, 2.0]) == 0
    assert grs([0.0], [0.5], [0.0]) > grs([0.0], [1.0], [0.0])
    assert coverage_and_width(np.full((50, 2), 1.0), [1.0, 1.0]) == (100.0, 0.0)
    assert coverage_and_width(np.random.default_rng(0).uniform(size=(100, 3)), [2.0, -1.0, 1.5])[0] == 0.0
    assert gelfand_ghosh(np.tile([1.0, 2.0], (5, 1)), [1.0, 2.0]) == (0.0, 0.0, 0.0)


def test_crps_translation_equivariance():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(300, 4)), rng.normal(size=4)
    assert crps(X + 3.7, y + 3.7) == pytest.approx(crps(X, y), rel=1e-10)


def test_crps_stable_when_doubling_draws():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40000, 1))
    half, full = crps(X[:20000], 0.0), crps(X, 0.0)
    se = np.std([crps(b, 0.0) for b in np.split(X, 40)], ddof=1) / np.sqrt(40)
    assert abs(full - half) < 3 * se * np.sqrt(2)


def test_gaussian_interval_width():
    X = np.random.default_rng(4).standard_normal((200000, 1))
    cov, width = coverage_and_width(X, 0.0)
    assert cov == 100.0 and width == pytest.approx(3.92, abs=0.03)


def test_gelfand_ghosh_noise_and_scaling():
    rng = np.random.default_rng(5)
    obs = rng.normal(size=50)
    R = obs + rng.standard_normal((20000, 50))
    G, P, _ = gelfand_ghosh(R, obs)
    assert P == pytest.approx(50, rel=0.02)
    assert G < 0.01 and G == pytest.approx(np.sum((R.mean(0) - obs) ** 2))
    m = R.mean(0)
    _, P2, _ = gelfand_ghosh(m + 2 * (R - m), obs)
    assert P2 == pytest.approx(4 * P)
