"""Posterior predictive draws for signals and outcomes, replicated data and
the deviance summaries built on them.

Every routine walks the stored latent draws of one or more chains. For each
draw the bases are rebuilt under that draw's covariance parameters, so the
cost per draw is one knot factorization plus a cross-covariance product.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .collapsed import WhitenedWorkspace, build_workspace
from .errors import DataError
from .reduced_rank import StructureBuilder, exponential_from_params, gneiting_from_params
from .sampler import from_unconstrained, to_unconstrained

DEFAULT_BATCH = 2000


@dataclass
class PredictiveDraws:
    """Predictive draws, one row per posterior sample and one column per target."""

    coords: np.ndarray
    draws: np.ndarray
    columns: tuple = ("s1", "s2")

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[1] != self.coords.shape[0]:
            raise ValueError("draws and coords disagree on the number of targets")

    @property
    def n_targets(self):
        return self.coords.shape[0]

    def mean(self):
        return self.draws.mean(axis=0)

    def var(self):
        return self.draws.var(axis=0, ddof=1) if self.draws.shape[0] > 1 else np.zeros(self.n_targets)

    def quantiles(self, level=0.95):
        lo = 0.5 * (1.0 - level)
        return np.quantile(self.draws, [lo, 0.5, 1.0 - lo], axis=0)

    def summary(self, level=0.95):
        q_lo, med, q_hi = self.quantiles(level)
        df = pd.DataFrame(self.coords, columns=list(self.columns))
        df["median"] = med
        df["q025"] = q_lo
        df["q975"] = q_hi
        df["width"] = q_hi - q_lo
        return df

    def write_csv(self, path, level=0.95):
        self.summary(level).to_csv(path, index=False, float_format="%.17g")

    @staticmethod
    def stack(parts):
        """Concatenate targets of several draw sets with equal draw counts."""
        return PredictiveDraws(
            coords=np.vstack([np.column_stack([p.coords, np.full(p.n_targets, np.nan)])
                              if p.coords.shape[1] == 2 else p.coords for p in parts]),
            draws=np.hstack([p.draws for p in parts]),
            columns=("s1", "s2", "x"),
        )


def _as_list(chains):
    return list(chains) if isinstance(chains, (list, tuple)) else [chains]


def posterior_samples(chains, max_draws=None):
    """``(params, u_star, v_star)`` for every stored latent draw.

    With ``max_draws`` an evenly spaced subset across the pooled draws is used.
    """
    items = []
    for ch in _as_list(chains):
        rows = ch.latent_rows()
        for i, u, v in zip(rows, ch.u_star, ch.v_star):
            items.append((ch, i, u, v))
    if max_draws is not None and len(items) > max_draws:
        keep = np.unique(np.linspace(0, len(items) - 1, max_draws).round().astype(int))
        items = [items[k] for k in keep]
    for ch, i, u, v in items:
        yield ch.params_at(i), u, v


def nearest_height_index(heights, x):
    heights = np.asarray(heights, dtype=float)
    return np.abs(np.subtract.outer(np.atleast_1d(x), heights)).argmin(axis=1)


def signal_noise(params, heights, x, mode="nearest"):
    """``tau2_z`` at arbitrary heights: nearest observed height, or linear
    interpolation with ``mode='interp'``."""
    if mode == "nearest":
        return np.asarray(params.tau2_z)[nearest_height_index(heights, x)]
    if mode == "interp":
        return np.interp(x, heights, params.tau2_z)
    raise ValueError(f"unknown tau2_z mode {mode!r}")


def _check_heights(data, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > data.max_height + 1e-12):
        bad = x[(x < 0) | (x > data.max_height + 1e-12)]
        raise DataError(f"target heights outside [0, {data.max_height}]: {bad[:5].tolist()}")


def _target_covariates(data, covariates, m):
    cov = {"_n": np.zeros(m)}
    for k, v in (covariates or {}).items():
        cov[k] = np.asarray(v, dtype=float)
    return cov


def _batches(m, size):
    size = max(int(size), 1)
    return [slice(i, min(i + size, m)) for i in range(0, m, size)]


def predict_signal(chains, data, knots, targets, rng, *, covariates=None, tau2_mode="nearest",
                   batch_size=DEFAULT_BATCH, max_draws=None, builder=None):
    """Posterior predictive draws of ``z`` at space-height targets.

    Parameters
    ----------
    targets : (m, 3) array of ``(s1, s2, x)``
    covariates : dict, optional
        Covariate values at the targets for designs that need them.
    tau2_mode : {'nearest', 'interp'}
        How the signal noise variance is taken at heights off the observed grid.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    _check_heights(data, targets[:, 2])
    m = targets.shape[0]
    h_idx = nearest_height_index(data.heights, targets[:, 2])
    Qt = data.design.q_z(h_idx, _target_covariates(data, covariates, m), data.n_x)
    builder = builder or StructureBuilder(data, knots)
    out = []
    for p, u_star, _ in posterior_samples(chains, max_draws):
        factor = builder.u_factor(p)
        g = factor[2] @ u_star
        tau2 = signal_noise(p, data.heights, targets[:, 2], tau2_mode)
        row = np.empty(m)
        for sl in _batches(m, batch_size):
            V, d2 = builder.u_whitened(p, targets[sl], factor)
            mean = Qt[sl] @ p.beta_z + V.T @ g
            row[sl] = mean + np.sqrt(tau2[sl] + d2) * rng.standard_normal(mean.size)
        out.append(row)
    return PredictiveDraws(targets, np.asarray(out), ("s1", "s2", "x"))


def _outcome_mean_var(p, builder, locs, Qt, gu, gv, factors):
    fu, fv = factors
    Vp, d2p = builder.plot_whitened(p, locs, fu)
    Vv, d2v = builder.v_whitened(p, locs, fv)
    mean = Qt @ p.beta_y + np.einsum("jki,k->ji", Vp, p.alpha) @ gu + Vv.T @ gv
    var = p.tau2_y + d2p @ p.alpha**2 + d2v
    return mean, var


def predict_outcome(chains, data, knots, targets, rng, *, covariates=None,
                    batch_size=DEFAULT_BATCH, max_draws=None, builder=None):
    """Posterior predictive draws of ``y`` at planar targets ``(m, 2)``."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    m = targets.shape[0]
    Qt = data.design.q_y(_target_covariates(data, covariates, m))
    builder = builder or StructureBuilder(data, knots)
    out = []
    for p, u_star, v_star in posterior_samples(chains, max_draws):
        fu, fv = builder.u_factor(p), builder.v_factor(p)
        gu, gv = fu[2] @ u_star, fv[2] @ v_star
        row = np.empty(m)
        for sl in _batches(m, batch_size):
            mean, var = _outcome_mean_var(p, builder, targets[sl], Qt[sl], gu, gv, (fu, fv))
            row[sl] = mean + np.sqrt(var) * rng.standard_normal(mean.size)
        out.append(row)
    return PredictiveDraws(targets, np.asarray(out))


def predict_outcome_given_signal(chains, data, knots, target_signals, rng, *, covariates=None,
                                 max_draws=None, builder=None):
    """Draws of ``y`` at new plots whose signals are observed.

    For every posterior sample the latent knot effects are redrawn from
    their exact conditional given the training data together with the
    targets' signals, then ``y`` is drawn at the target plots.

    Parameters
    ----------
    target_signals : JointDataset
        Target plots and their signals; the outcome column is ignored. Its
        height grid must match the training grid when the signal design has
        height-specific terms.
    """
    ts = target_signals
    _check_heights(data, ts.signal_coords[:, 2])
    h_idx = nearest_height_index(data.heights, ts.signal_coords[:, 2])
    cov_t = _target_covariates(data, covariates if covariates is not None else ts.covariates, ts.n_s)
    Qz_t = data.design.q_z(h_idx, {k: np.asarray(v)[ts.plot_index] for k, v in cov_t.items()}, data.n_x)
    Qy_t = data.design.q_y(cov_t)
    builder = builder or StructureBuilder(data, knots)

    Q = sla.block_diag(np.vstack([data.Q_z, Qz_t]), data.Q_y)
    w = np.concatenate([data.z, ts.z, data.y])
    out = []
    for p, _, _ in posterior_samples(chains, max_draws):
        rr = builder.build(p)
        fu = (gneiting_from_params(p), rr.Lu, rr.Lu_inv)
        fv = (exponential_from_params(p), rr.Lv, rr.Lv_inv)
        Vt, d2t = builder.u_whitened(p, ts.signal_coords, fu)
        d_z = np.concatenate([rr.d_z2, signal_noise(p, data.heights, ts.signal_coords[:, 2]) + d2t])
        ws = WhitenedWorkspace(np.hstack([rr.Vu, Vt]), rr.Gw, rr.Vv, d_z, rr.d_y2, Q, w)
        g = ws.recover_latents(np.concatenate([p.beta_z, p.beta_y]), rng)
        nu = rr.Lu.shape[0]
        mean, var = _outcome_mean_var(p, builder, ts.plot_locations, Qy_t, g[:nu], g[nu:], (fu, fv))
        out.append(mean + np.sqrt(var) * rng.standard_normal(mean.size))
    return PredictiveDraws(ts.plot_locations, np.asarray(out))


def replicate_data(chains, data, knots, rng, *, max_draws=None, builder=None):
    """Posterior predictive replicates at every observed coordinate.

    Returns an array ``(draws, n + n_s)`` with signals first.
    """
    builder = builder or StructureBuilder(data, knots)
    out = []
    for p, u_star, v_star in posterior_samples(chains, max_draws):
        rr = builder.build(p)
        gu, gv = rr.Lu_inv @ u_star, rr.Lv_inv @ v_star
        mz = data.Q_z @ p.beta_z + rr.Vu.T @ gu
        my = data.Q_y @ p.beta_y + rr.Gw @ gu + rr.Vv.T @ gv
        mean = np.concatenate([mz, my])
        sd = np.sqrt(np.concatenate([rr.d_z2, rr.d_y2]))
        out.append(mean + sd * rng.standard_normal(mean.size))
    return np.asarray(out)


def observed_vector(data):
    """Stacked ``(z, y)`` in the order used by :func:`replicate_data`."""
    return np.concatenate([data.z, data.y])


def deviance(params, data, builder):
    rr = builder.build(params)
    return -2.0 * build_workspace(params, rr, data, whitened=True).loglik(params.beta)


def dic(chains, data, knots, *, max_draws=None, builder=None):
    """``(DIC, p_D)`` from collapsed-likelihood deviances.

    The plug-in deviance uses posterior means taken on the sampler's
    transformed scale and mapped back.
    """
    builder = builder or StructureBuilder(data, knots)
    rows = []
    for ch in _as_list(chains):
        for i in range(ch.draws.shape[0]):
            rows.append((ch, i))
    if max_draws is not None and len(rows) > max_draws:
        keep = np.unique(np.linspace(0, len(rows) - 1, max_draws).round().astype(int))
        rows = [rows[k] for k in keep]
    params = [ch.params_at(i) for ch, i in rows]
    devs = np.array([deviance(p, data, builder) for p in params])
    phis = np.array([to_unconstrained(p) for p in params])
    p_bar = from_unconstrained(phis.mean(axis=0), params[0])
    p_bar = p_bar.with_beta(np.mean([p.beta for p in params], axis=0))
    d_bar = float(devs.mean())
    p_d = d_bar - deviance(p_bar, data, builder)
    return d_bar + p_d, p_d
