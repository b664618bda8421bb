import numpy as np
import pytest
import scipy.linalg as sla

from jointpp.collapsed import build_workspace
from jointpp.errors import DataError
from jointpp.predict import (
    PredictiveDraws,
    dic,
    nearest_height_index,
    observed_vector,
    posterior_samples,
    predict_outcome,
    predict_outcome_given_signal,
    predict_signal,
    replicate_data,
    signal_noise,
)
from jointpp.reduced_rank import assemble_structure
from jointpp.sampler import PosteriorChain, params_to_row

from conftest import random_instance
from oracles import expo, gneiting, kmat, reduced_pieces


class ZeroRng:
    """Stand-in generator whose normal draws are all zero, exposing means."""

    def standard_normal(self, size=None):
        return np.zeros(size)


def fixed_chain(data, knots, p, u, v, reps=3):
    row = params_to_row(p)
    return PosteriorChain(
        names=[f"c{i}" for i in range(row.size)],
        draws=np.tile(row, (reps, 1)),
        iterations=np.arange(reps),
        latent_iterations=np.arange(reps),
        u_star=np.tile(u, (reps, 1)),
        v_star=np.tile(v, (reps, 1)),
        log_target=np.zeros(reps),
        accept_rate=0.5,
        shape=(data.n_x, knots.n_x, data.p_y),
    )


@pytest.fixture
def setup(small_instance, rng):
    data, knots, p = small_instance
    u = rng.normal(size=knots.n_star)
    v = rng.normal(size=knots.n_v)
    return data, knots, p, u, v, fixed_chain(data, knots, p, u, v)


def test_signal_at_knots_is_noise_free_in_basis(setup):
    data, knots, p, u, v, ch = setup
    targets = knots.joint_u
    out = predict_signal(ch, data, knots, targets, ZeroRng())
    assert np.allclose(out.draws[0], p.beta_z[0] + u, atol=1e-9)


def test_signal_mean_matches_kriging(setup, rng):
    data, knots, p, u, v, ch = setup
    targets = np.column_stack([rng.uniform(0, 3, (7, 2)), rng.uniform(0, 4, 7)])
    Ls = knots.joint_u
    B = np.linalg.solve(kmat(gneiting, p, Ls, Ls), kmat(gneiting, p, Ls, targets)).T
    out = predict_signal(ch, data, knots, targets, ZeroRng(), batch_size=3)
    assert np.allclose(out.draws[1], p.beta_z[0] + B @ u, atol=1e-9)


def test_signal_spread_matches_variance(setup, rng):
    data, knots, p, u, v, _ = setup
    ch = fixed_chain(data, knots, p, u, v, reps=6000)
    t = np.array([[1.0, 1.2, data.heights[1]]])
    Ls = knots.joint_u
    c = kmat(gneiting, p, Ls, t)
    d2 = p.sigma2_u - (c.T @ np.linalg.solve(kmat(gneiting, p, Ls, Ls), c)).item()
    out = predict_signal(ch, data, knots, t, rng)
    assert out.var()[0] == pytest.approx(p.tau2_z[1] + d2, rel=0.06)


def test_outcome_mean_matches_dense(setup, rng):
    data, knots, p, u, v, ch = setup
    locs = rng.uniform(0, 3, (5, 2))
    cov1 = rng.normal(size=5)
    Ls = knots.joint_u
    Cs = kmat(gneiting, p, Ls, Ls)
    mean = p.beta_y[0] + p.beta_y[1] * cov1
    for j, s in enumerate(locs):
        pts = [(s[0], s[1], x) for x in knots.heights]
        mean[j] += p.alpha @ np.linalg.solve(Cs, kmat(gneiting, p, Ls, pts)).T @ u
    mean += np.linalg.solve(kmat(expo, p, knots.spatial_v, knots.spatial_v),
                            kmat(expo, p, knots.spatial_v, locs)).T @ v
    out = predict_outcome(ch, data, knots, locs, ZeroRng(), covariates={"cov1": cov1}, batch_size=2)
    assert np.allclose(out.draws[0], mean, atol=1e-9)


def test_outcome_without_signal_effect(setup, rng):
    data, knots, p, u, v, _ = setup
    p = p.copy()
    p.alpha = np.zeros_like(p.alpha)
    ch = fixed_chain(data, knots, p, u, np.zeros_like(v))
    locs = rng.uniform(0, 3, (4, 2))
    out = predict_outcome(ch, data, knots, locs, ZeroRng(), covariates={"cov1": np.ones(4)})
    assert np.allclose(out.draws, p.beta_y.sum())


def test_conditional_outcome_matches_dense(rng):
    full, knots, p = random_instance(np.random.default_rng(31), n_s=10, n_x=3, n_u=4, n_xs=2, n_v=5)
    tr = np.arange(7)
    te = np.arange(7, 10)
    train, test = full.subset_plots(tr), full.subset_plots(te)
    ch = fixed_chain(train, knots, p, np.zeros(knots.n_star), np.zeros(knots.n_v))
    out = predict_outcome_given_signal(ch, train, knots, test, ZeroRng())

    A, J, d = reduced_pieces(full, knots, p)
    Q = sla.block_diag(full.Q_z, full.Q_y)
    resid = np.concatenate([full.z, full.y]) - Q @ p.beta
    obs = np.concatenate([np.arange(full.n), full.n + tr])
    Ao = A[obs]
    S = Ao @ J @ Ao.T + np.diag(d[obs])
    g = J @ Ao.T @ np.linalg.solve(S, resid[obs])
    expect = full.Q_y[te] @ p.beta_y + A[full.n + te] @ g
    assert np.allclose(out.draws[0], expect, rtol=1e-7, atol=1e-9)


def test_replicates_mean(setup):
    data, knots, p, u, v, ch = setup
    A, _, _ = reduced_pieces(data, knots, p)
    Q = sla.block_diag(data.Q_z, data.Q_y)
    rep = replicate_data(ch, data, knots, ZeroRng())
    assert rep.shape == (3, data.n + data.n_s)
    assert np.allclose(rep[0], Q @ p.beta + A @ np.concatenate([u, v]), atol=1e-9)
    assert observed_vector(data).shape == (data.n + data.n_s,)


def test_replicates_deterministic(setup):
    data, knots, _, _, _, ch = setup
    a = replicate_data(ch, data, knots, np.random.default_rng(1))
    b = replicate_data(ch, data, knots, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_dic_single_point(setup):
    data, knots, p, u, v, ch = setup
    D, pd_ = dic(ch, data, knots)
    rr = assemble_structure(p, data, knots)
    dev = -2 * build_workspace(p, rr, data).loglik(p.beta)
    assert pd_ == pytest.approx(0.0, abs=1e-8)
    assert D == pytest.approx(dev, rel=1e-10)


def test_height_checks(setup):
    data, knots, _, _, _, ch = setup
    with pytest.raises(DataError):
        predict_signal(ch, data, knots, [[0.0, 0.0, data.max_height + 1]], ZeroRng())


def test_noise_modes(small_instance):
    data, _, p = small_instance
    h = data.heights
    mid = 0.5 * (h[0] + h[1])
    assert signal_noise(p, h, [h[2]])[0] == p.tau2_z[2]
    assert signal_noise(p, h, [mid], "interp")[0] == pytest.approx(0.5 * (p.tau2_z[0] + p.tau2_z[1]))
    assert nearest_height_index(h, [h[0] - 0.5])[0] == 0
    with pytest.raises(ValueError):
        signal_noise(p, h, [mid], "cubic")


def test_posterior_samples_thinning(setup):
    data, knots, p, u, v, _ = setup
    ch = fixed_chain(data, knots, p, u, v, reps=10)
    assert len(list(posterior_samples([ch, ch], max_draws=5))) == 5
    assert len(list(posterior_samples(ch))) == 10


def test_predictive_draws_summary(tmp_path):
    d = PredictiveDraws(np.zeros((2, 2)), np.arange(20.0).reshape(10, 2))
    s = d.summary()
    assert list(s.columns) == ["s1", "s2", "median", "q025", "q975", "width"]
    assert np.allclose(s["median"], [9, 10])
    d.write_csv(tmp_path / "p.csv")
    both = PredictiveDraws.stack([d, PredictiveDraws(np.ones((1, 3)), np.ones((10, 1)), ("s1", "s2", "x"))])
    assert both.n_targets == 3 and np.isnan(both.coords[0, 2])
    with pytest.raises(ValueError):
        PredictiveDraws(np.zeros((3, 2)), np.zeros((4, 2)))


def test_summary_quantiles_match_draws(setup):
    data, knots, _, _, _, ch = setup
    out = predict_signal(ch, data, knots, knots.joint_u[:4], np.random.default_rng(0))
    s = out.summary()
    assert len(s) == 4 and np.all(s["q025"] <= s["median"]) and np.all(s["median"] <= s["q975"])
    assert np.allclose(s["q975"], np.quantile(out.draws, 0.975, axis=0))


def test_replicate_variance_at_least_noise(setup):
    data, knots, p, u, v, _ = setup
    ch = fixed_chain(data, knots, p, u, v, reps=4000)
    rep = replicate_data(ch, data, knots, np.random.default_rng(2))
    noise = np.concatenate([p.tau2_z[data.height_index], np.full(data.n_s, p.tau2_y)])
    assert np.all(rep.var(0) >= 0.85 * noise)


def test_uninformative_signal_reduces_to_marginal():
    from jointpp.collapsed import recover_latents

    full, knots, p = random_instance(np.random.default_rng(32), n_s=9, n_x=3, n_u=4, n_xs=2, n_v=4)
    train, test = full.subset_plots(np.arange(6)), full.subset_plots(np.arange(6, 9))
    vague = p.copy()
    vague.tau2_z = np.full(full.n_x, 1e10)
    rr = assemble_structure(vague, train, knots)
    rng = np.random.default_rng(1)
    reps = 3000
    ch = fixed_chain(train, knots, vague, np.zeros(knots.n_star), np.zeros(knots.n_v), reps=reps)
    lat = [recover_latents(vague, rr, train, rng) for _ in range(reps)]
    ch.u_star = np.array([a for a, _ in lat])
    ch.v_star = np.array([b for _, b in lat])
    marg = predict_outcome(ch, train, knots, test.plot_locations, np.random.default_rng(2),
                           covariates=test.covariates)
    cond = predict_outcome_given_signal(ch, train, knots, test, np.random.default_rng(3))
    se = np.sqrt(2 * marg.var() / reps)
    assert np.all(np.abs(cond.mean() - marg.mean()) < 4 * se)
    assert np.allclose(cond.var(), marg.var(), rtol=0.12)
