"""Priors, the blocked random-walk Metropolis sampler and chain bookkeeping.

The covariance-type parameters, ``alpha`` and the noise variances move
together in one Gaussian random-walk block on the transformed scale (log
for positive parameters, logit for ``gamma``). ``beta`` is then drawn from
its Gaussian full conditional and, at the thinning stride after burn-in,
the latent knot effects are recovered exactly.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist, pdist
from scipy.special import gammaln

from .collapsed import build_workspace, split_latents
from .domain import ModelParams
from .errors import NumericalFailure
from .reduced_rank import StructureBuilder

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.234
SCALARS = ("sigma2_u", "a", "gamma", "c", "sigma2_v", "phi_v", "tau2_y")


@dataclass
class PriorSpec:
    """Prior hyperparameters.

    Inverse-gamma ``(shape, scale)`` pairs for the variances, uniform
    supports for ``a``, ``gamma``, ``c`` and ``phi_v``, Gaussian priors for
    ``alpha`` and the stacked ``beta = (beta_z, beta_y)``. ``phi_v_range``
    left as ``None`` resolves to ``(3 / d_max, 3 / d_min)`` over the
    inter-plot distances.
    """

    sigma2_u: tuple = (2.0, 1.0)
    sigma2_v: tuple = (2.0, 1.0)
    tau2_y: tuple = (2.0, 1.0)
    tau2_z: tuple = (2.0, 1.0)
    a_range: tuple = (1e-3, 1e3)
    c_range: tuple = (1e-3, 1e3)
    gamma_range: tuple = (0.0, 1.0)
    phi_v_range: tuple = None
    alpha_mean: float = 0.0
    alpha_var: float = 100.0
    beta_mean: float = 0.0
    beta_var: float = 1e6

    def __post_init__(self):
        for name in ("sigma2_u", "sigma2_v", "tau2_y", "tau2_z"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ValueError(f"inverse-gamma hyperparameters for {name} must be positive")
        for name in ("a_range", "c_range", "gamma_range", "phi_v_range"):
            r = getattr(self, name)
            if r is not None and not r[0] < r[1]:
                raise ValueError(f"{name} must be a nonempty interval")
        if self.gamma_range[0] < 0 or self.gamma_range[1] > 1:
            raise ValueError("gamma support must lie within [0, 1]")
        if not (np.all(np.asarray(self.alpha_var) > 0) and np.all(np.asarray(self.beta_var) > 0)):
            raise ValueError("prior variances must be positive")

    def resolve_phi_range(self, plot_locations):
        if self.phi_v_range is not None:
            return tuple(self.phi_v_range)
        d = pdist(plot_locations)
        d = d[d > 0]
        return (3.0 / d.max(), 3.0 / d.min())

    def alpha_moments(self, k):
        return np.broadcast_to(self.alpha_mean, (k,)).astype(float), np.broadcast_to(
            self.alpha_var, (k,)
        ).astype(float)

    def beta_moments(self, q):
        return np.broadcast_to(self.beta_mean, (q,)).astype(float), np.broadcast_to(
            self.beta_var, (q,)
        ).astype(float)


@dataclass
class SamplerConfig:
    n_iter: int = 50000
    n_burn: int = 5000
    n_chains: int = 3
    thin: int = 10
    seed: int = 0
    proposal_sd: float = 0.05
    adapt_window: int = 100
    adapt_covariance: bool = True
    init_jitter: float = 0.1

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if self.thin < 1 or self.n_chains < 1 or self.adapt_window < 1:
            raise ValueError("thin, n_chains and adapt_window must be >= 1")
        if np.any(np.asarray(self.proposal_sd) <= 0):
            raise ValueError("proposal standard deviations must be positive")


def param_names(n_x, n_alpha, beta_y_names, beta_z_names):
    return (
        list(SCALARS)
        + [f"tau2_z_{k + 1}" for k in range(n_x)]
        + [f"alpha_{k + 1}" for k in range(n_alpha)]
        + [f"beta_y_{n}" for n in beta_y_names]
        + [f"beta_z_{n}" for n in beta_z_names]
    )


def params_to_row(p):
    return np.concatenate(
        [[p.sigma2_u, p.a, p.gamma, p.c, p.sigma2_v, p.phi_v, p.tau2_y], p.tau2_z, p.alpha, p.beta_y, p.beta_z]
    )


def row_to_params(row, n_x, n_alpha, p_y):
    row = np.asarray(row, dtype=float)
    i = 7
    tau2_z = row[i:i + n_x]
    i += n_x
    alpha = row[i:i + n_alpha]
    i += n_alpha
    beta_y = row[i:i + p_y]
    beta_z = row[i + p_y:]
    return ModelParams(*row[:7], tau2_z=tau2_z, alpha=alpha, beta_y=beta_y, beta_z=beta_z)


# -- transformed scale ------------------------------------------------------


def to_unconstrained(p):
    """``(log s2_u, log a, logit g, log c, log s2_v, log phi_v, log t2_y, log t2_z.., alpha..)``."""
    g = p.gamma
    return np.concatenate(
        [
            [math.log(p.sigma2_u), math.log(p.a), math.log(g) - math.log1p(-g), math.log(p.c)],
            [math.log(p.sigma2_v), math.log(p.phi_v), math.log(p.tau2_y)],
            np.log(p.tau2_z),
            p.alpha,
        ]
    )


def from_unconstrained(phi, template):
    """Inverse of :func:`to_unconstrained`; ``beta`` is copied from ``template``."""
    n_x = template.tau2_z.size
    e = np.exp(phi[:7])
    gamma = 1.0 / (1.0 + math.exp(-phi[2])) if phi[2] > -700 else 0.0
    return ModelParams(
        sigma2_u=e[0],
        a=e[1],
        gamma=gamma,
        c=e[3],
        sigma2_v=e[4],
        phi_v=e[5],
        tau2_y=e[6],
        tau2_z=np.exp(phi[7:7 + n_x]),
        alpha=np.array(phi[7 + n_x:]),
        beta_y=template.beta_y.copy(),
        beta_z=template.beta_z.copy(),
    )


def log_jacobian(p):
    return (
        math.log(p.sigma2_u) + math.log(p.a) + math.log(p.gamma) + math.log1p(-p.gamma)
        + math.log(p.c) + math.log(p.sigma2_v) + math.log(p.phi_v) + math.log(p.tau2_y)
        + float(np.sum(np.log(p.tau2_z)))
    )


def _log_ig(x, shape, scale):
    x = np.asarray(x, dtype=float)
    return float(np.sum(shape * math.log(scale) - gammaln(shape) - (shape + 1) * np.log(x) - scale / x))


def _log_uniform(x, rng_):
    lo, hi = rng_
    if not lo < x < hi:
        return -np.inf
    return -math.log(hi - lo)


def log_prior(p, priors, phi_v_range):
    """Log prior density of the Metropolis block (``beta`` excluded)."""
    if priors is None:
        return 0.0
    lp = (
        _log_uniform(p.a, priors.a_range)
        + _log_uniform(p.gamma, priors.gamma_range)
        + _log_uniform(p.c, priors.c_range)
        + _log_uniform(p.phi_v, phi_v_range)
    )
    if not np.isfinite(lp):
        return -np.inf
    lp += _log_ig(p.sigma2_u, *priors.sigma2_u)
    lp += _log_ig(p.sigma2_v, *priors.sigma2_v)
    lp += _log_ig(p.tau2_y, *priors.tau2_y)
    lp += _log_ig(p.tau2_z, *priors.tau2_z)
    mu, var = priors.alpha_moments(p.alpha.size)
    r = p.alpha - mu
    lp += -0.5 * float(np.sum(r * r / var))
    return lp


def in_support(p, priors, phi_v_range):
    if not p.is_valid() or not 0.0 < p.gamma < 1.0:
        return False
    if priors is None:
        return True
    return np.isfinite(log_prior(p, priors, phi_v_range))


def log_target(params, rr, data, priors, *, jacobian=True, phi_v_range=None, ws=None):
    """Collapsed log-likelihood + log prior (+ log Jacobian of the transform).

    ``priors=None`` means flat priors. Parameters outside the support give
    ``-inf``.
    """
    if phi_v_range is None and priors is not None:
        phi_v_range = priors.resolve_phi_range(data.plot_locations)
    if not in_support(params, priors, phi_v_range):
        return -np.inf
    ws = ws if ws is not None else build_workspace(params, rr, data)
    out = ws.loglik(params.beta) + log_prior(params, priors, phi_v_range)
    if jacobian:
        out += log_jacobian(params)
    return out


# -- chain machinery --------------------------------------------------------


@dataclass
class ChainState:
    params: ModelParams
    phi: np.ndarray
    log_prior: float
    loglik: float
    ws: object
    accepted: int = 0
    proposed: int = 0
    failures: int = 0
    consecutive_failures: int = 0

    @property
    def log_target(self):
        return self.loglik + self.log_prior


@dataclass(eq=False)
class PosteriorChain:
    """Post burn-in draws of one chain (natural scale)."""

    names: list
    draws: np.ndarray
    iterations: np.ndarray
    latent_iterations: np.ndarray
    u_star: np.ndarray
    v_star: np.ndarray
    log_target: np.ndarray
    accept_rate: float
    n_failures: int = 0
    seed: int = None
    wall_time: float = 0.0
    shape: tuple = field(default=(0, 0, 0))  # (n_x, n_alpha, p_y)

    def params_at(self, i):
        return row_to_params(self.draws[i], *self.shape)

    def latent_rows(self):
        """Row indices into ``draws`` matching each stored latent draw."""
        return np.searchsorted(self.iterations, self.latent_iterations)

    def column(self, name):
        return self.draws[:, self.names.index(name)]

    def to_frames(self):
        draws = pd.DataFrame(self.draws, columns=self.names)
        draws.insert(0, "iteration", self.iterations)
        draws["log_target"] = self.log_target
        lat = pd.DataFrame(
            np.hstack([self.u_star, self.v_star]),
            columns=[f"u_star_{i + 1}" for i in range(self.u_star.shape[1])]
            + [f"v_star_{i + 1}" for i in range(self.v_star.shape[1])],
        )
        lat.insert(0, "iteration", self.latent_iterations)
        return draws, lat

    def write_csv(self, draws_path, latent_path):
        draws, lat = self.to_frames()
        draws.to_csv(draws_path, index=False, float_format="%.17g")
        lat.to_csv(latent_path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, draws_path, latent_path, shape, accept_rate=np.nan):
        d = pd.read_csv(draws_path, float_precision="round_trip")
        lat = pd.read_csv(latent_path, float_precision="round_trip")
        names = [c for c in d.columns if c not in ("iteration", "log_target")]
        ucols = [c for c in lat.columns if c.startswith("u_star_")]
        vcols = [c for c in lat.columns if c.startswith("v_star_")]
        return cls(
            names=names,
            draws=d[names].to_numpy(dtype=float),
            iterations=d["iteration"].to_numpy(dtype=int),
            latent_iterations=lat["iteration"].to_numpy(dtype=int),
            u_star=lat[ucols].to_numpy(dtype=float),
            v_star=lat[vcols].to_numpy(dtype=float),
            log_target=d["log_target"].to_numpy(dtype=float),
            accept_rate=accept_rate,
            shape=tuple(shape),
        )


def adapt_proposals(sds, accept_rate):
    """Scale proposal sds by ``exp(rate - 0.234)``."""
    return np.asarray(sds) * math.exp(accept_rate - TARGET_ACCEPT)


class BlockSampler:
    """Holds everything fixed during a run: data, knots, priors and the
    cached basis geometry."""

    def __init__(self, data, knots, priors, config):
        self.data = data
        self.knots = knots
        self.priors = priors
        self.config = config
        self.builder = StructureBuilder(data, knots)
        self.phi_v_range = priors.resolve_phi_range(data.plot_locations) if priors else None
        q = data.p_z + data.p_y
        mu, var = (priors or PriorSpec()).beta_moments(q)
        self.beta_mean = mu
        self.beta_prec = np.diag(1.0 / var)
        d = 7 + data.n_x + knots.n_x
        sd = np.broadcast_to(np.asarray(config.proposal_sd, dtype=float), (d,)).copy()
        self.prop_chol = np.diag(sd)
        self.scale = 1.0
        self.names = param_names(
            data.n_x, knots.n_x, data.design.y_names(), data.design.z_names(data.n_x)
        )

    @property
    def dim(self):
        return self.prop_chol.shape[0]

    def evaluate(self, params):
        """``(log_prior + jacobian, loglik, workspace)``; raises on numerical failure."""
        if not in_support(params, self.priors, self.phi_v_range):
            return -np.inf, -np.inf, None
        lp = log_prior(params, self.priors, self.phi_v_range) + log_jacobian(params)
        rr = self.builder.build(params)
        ws = build_workspace(params, rr, self.data, whitened=True)
        ws.rr = rr
        return lp, ws.loglik(params.beta), ws

    def init_state(self, params):
        lp, ll, ws = self.evaluate(params)
        if not np.isfinite(lp + ll):
            raise NumericalFailure("init", "initial values have zero posterior density")
        return ChainState(params=params, phi=to_unconstrained(params), log_prior=lp, loglik=ll, ws=ws)

    def block_step(self, state, rng):
        return metropolis_block_step(state, self, rng)

    def gibbs_beta(self, state, rng):
        beta = state.ws.sample_beta(self.beta_mean, self.beta_prec, rng)
        state.params = state.params.with_beta(beta)
        state.loglik = state.ws.loglik(beta)
        return state


def metropolis_block_step(state, sampler, rng):
    """One joint random-walk Metropolis update of the covariance block.

    Proposals whose likelihood cannot be evaluated count as rejections.
    """
    eps = rng.standard_normal(sampler.dim)
    log_u = math.log(rng.uniform())
    phi_new = state.phi + sampler.scale * (sampler.prop_chol @ eps)
    state.proposed += 1
    try:
        cand = from_unconstrained(phi_new, state.params)
        lp, ll, ws = sampler.evaluate(cand)
    except (NumericalFailure, OverflowError, FloatingPointError, ValueError) as exc:
        state.failures += 1
        state.consecutive_failures += 1
        log.debug("proposal rejected after numerical failure: %s", exc)
        return state
    state.consecutive_failures = 0
    if np.isfinite(lp + ll) and log_u < (lp + ll) - state.log_target:
        state.params, state.phi, state.log_prior, state.loglik, state.ws = cand, phi_new, lp, ll, ws
        state.accepted += 1
    return state


def _binned_pairs(locations, n_bins):
    """Plot-pair bins: bin 0 holds each plot with itself, the rest split the
    pairwise distances below half the maximum into equal-count groups."""
    D = cdist(locations, locations)
    n = D.shape[0]
    iu = np.triu_indices(n, 1)
    dist = D[iu]
    keep = dist <= 0.5 * dist.max() if dist.size else np.zeros(0, bool)
    bins = [(np.eye(n), 0.0)]
    if keep.sum() >= n_bins:
        edges = np.quantile(dist[keep], np.linspace(0, 1, n_bins + 1))
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = (D > 0) & (D >= lo) & (D <= hi) & (D <= 0.5 * dist.max())
            if sel.any():
                bins.append((sel.astype(float), float(D[sel].mean())))
    return bins


def _empirical_signal_cov(data, rz, n_bins=8):
    """Binned empirical covariances of signal residuals.

    Returns rows ``(distance, height gap squared, covariance, count)``.
    """
    R = np.zeros((data.n_s, data.n_x))
    N = np.zeros_like(R)
    R[data.plot_index, data.height_index] = rz
    N[data.plot_index, data.height_index] = 1.0
    dx2 = np.subtract.outer(data.heights, data.heights) ** 2
    out = []
    for M, dist in _binned_pairs(data.plot_locations, n_bins):
        num = R.T @ M @ R
        cnt = N.T @ M @ N
        ok = cnt > 0
        for g in np.unique(dx2[ok]):
            sel = ok & (dx2 == g)
            out.append((dist, g, num[sel].sum() / cnt[sel].sum(), cnt[sel].sum()))
    return np.array(out)


def _fit_gneiting_moments(emp, var_total, hr, dmax):
    """Least-squares Gneiting fit to binned covariances, excluding the
    zero-lag cell that also carries the nugget."""
    use = ~((emp[:, 0] == 0) & (emp[:, 1] == 0))
    d, g, cv, n = emp[use].T
    wts = np.sqrt(n / n.max())

    def model(t):
        s2, a, gam, c = np.exp(t[0]), np.exp(t[1]), 1.0 / (1.0 + np.exp(-t[2])), np.exp(t[3])
        f = a * g + 1.0
        return s2 * f**-gam * np.exp(-c * d * f ** (-gam / 2))

    t0 = np.array([math.log(0.5 * var_total), math.log(16.0 / hr**2), 0.0, math.log(6.0 / dmax)])
    res = least_squares(lambda t: wts * (model(t) - cv), t0, bounds=(t0 - 8, t0 + 8))
    t = res.x
    s2 = min(math.exp(t[0]), 0.95 * var_total)
    return s2, math.exp(t[1]), float(np.clip(1.0 / (1.0 + math.exp(-t[2])), 0.02, 0.98)), math.exp(t[3])


def _fit_exponential_moments(locations, r, phi_range, n_bins=8):
    bins = _binned_pairs(locations, n_bins)[1:]
    if not bins:
        return 0.2 * np.var(r), math.sqrt(phi_range[0] * phi_range[1])
    d = np.array([b[1] for b in bins])
    cv = np.array([(r @ M @ r) / M.sum() for M, _ in bins])
    wts = np.sqrt(np.array([M.sum() for M, _ in bins]))
    wts = wts / wts.max()
    v = float(np.var(r))
    lo, hi = np.log(phi_range)

    def resid(t):
        return wts * (np.exp(t[0]) * np.exp(-np.exp(t[1]) * d) - cv)

    t0 = np.array([math.log(0.3 * v), 0.5 * (lo + hi)])
    res = least_squares(resid, t0, bounds=([t0[0] - 10, lo], [math.log(v), hi]))
    return min(math.exp(res.x[0]), 0.9 * v), math.exp(res.x[1])


def initial_params(data, knots, rng=None, jitter=0.0, priors=None):
    """Data-driven starting values.

    Regression coefficients come from least squares. The signal covariance
    parameters are fitted to binned empirical covariances of the signal
    residuals, and the noise variances take what is left over. ``alpha``
    comes from a ridge regression of the outcome residuals on the signal
    residuals at the height knots, and the outcome process from an
    exponential fit to what remains.
    """
    bz = np.linalg.lstsq(data.Q_z, data.z, rcond=None)[0]
    by = np.linalg.lstsq(data.Q_y, data.y, rcond=None)[0]
    rz = data.z - data.Q_z @ bz
    ry = data.y - data.Q_y @ by
    vz = float(np.var(rz)) or 1.0
    vy = float(np.var(ry)) or 1.0
    hr = max(np.ptp(data.heights), 1e-6)
    dmax = max(pdist(data.plot_locations).max(), 1e-6) if data.n_s > 1 else 1.0
    phi_range = (priors or PriorSpec()).resolve_phi_range(data.plot_locations) if data.n_s > 1 else (0.1, 10.0)

    s2u, a, gam, c = 0.5 * vz, 16.0 / hr**2, 0.5, 6.0 / dmax
    if data.n_s > 2:
        try:
            s2u, a, gam, c = _fit_gneiting_moments(_empirical_signal_cov(data, rz), vz, hr, dmax)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            log.debug("moment fit for the signal covariance failed; using defaults")
    tau2_z = np.array(
        [max(np.var(rz[data.height_index == k]) - s2u, 0.05 * vz) if np.any(data.height_index == k) else 0.5 * vz
         for k in range(data.n_x)]
    )

    # residual signal at the observed height nearest each knot height
    near = np.abs(np.subtract.outer(knots.heights, data.heights)).argmin(axis=1)
    U = np.zeros((data.n_s, knots.n_x))
    for k, h in enumerate(near):
        rows = np.flatnonzero(data.height_index == h)
        U[data.plot_index[rows], k] = rz[rows]
    lam = 1e-2 * np.trace(U.T @ U) / max(knots.n_x, 1) + 1e-12
    alpha = np.linalg.solve(U.T @ U + lam * np.eye(knots.n_x), U.T @ ry)
    ry_left = ry - U @ alpha
    vleft = max(float(np.var(ry_left)), 1e-3 * vy)
    s2v, phi_v = 0.2 * vleft, math.sqrt(phi_range[0] * phi_range[1])
    if data.n_s > 2:
        try:
            s2v, phi_v = _fit_exponential_moments(data.plot_locations, ry_left, phi_range)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            log.debug("moment fit for the outcome covariance failed; using defaults")
    s2u = max(s2u, 0.05 * vz)
    s2v = max(s2v, 0.05 * vleft)

    p = ModelParams(
        sigma2_u=s2u,
        a=a,
        gamma=gam,
        c=c,
        sigma2_v=s2v,
        phi_v=float(np.clip(phi_v, *phi_range)),
        tau2_y=max(vleft - s2v, 0.05 * vleft),
        tau2_z=tau2_z,
        alpha=alpha,
        beta_y=by,
        beta_z=bz,
    )
    if jitter > 0 and rng is not None:
        phi = to_unconstrained(p)
        phi = phi + jitter * rng.standard_normal(phi.size)
        p = from_unconstrained(phi, p)
    # keep the start strictly inside the uniform supports
    pr = priors or PriorSpec()
    p.a = _inside(p.a, pr.a_range)
    p.c = _inside(p.c, pr.c_range)
    p.gamma = _inside(p.gamma, pr.gamma_range)
    p.phi_v = _inside(p.phi_v, phi_range)
    return p


def _inside(x, support, margin=0.01):
    lo, hi = support
    w = hi - lo
    return float(np.clip(x, lo + margin * min(w, max(abs(lo), 1e-3)), hi - margin * min(w, max(abs(hi), 1e-3))))


def run_chain(data, knots, priors, config, seed=None, init=None, progress=None):
    """Run one chain; burn-in draws are discarded.

    Parameters
    ----------
    seed : int or numpy.random.SeedSequence, optional
        Defaults to ``config.seed``.
    init : ModelParams, optional
        Starting value; data-driven (jittered) when omitted.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    sampler = BlockSampler(data, knots, priors, config)
    t0 = time.perf_counter()

    if init is None:
        state = None
        for _ in range(20):
            try:
                state = sampler.init_state(
                    initial_params(data, knots, rng, config.init_jitter, priors)
                )
                break
            except NumericalFailure:
                continue
        if state is None:
            raise NumericalFailure("init", "could not find a valid starting point")
    else:
        state = sampler.init_state(init.copy())

    n_keep = config.n_iter - config.n_burn
    rows = np.empty((n_keep, len(sampler.names)))
    lt = np.empty(n_keep)
    lat_iters, u_draws, v_draws = [], [], []
    n_star = knots.n_star
    history = []
    win_acc = win_prop = 0
    kept_acc = kept_prop = 0
    window = config.adapt_window

    for it in range(config.n_iter):
        acc0 = state.accepted
        metropolis_block_step(state, sampler, rng)
        if state.consecutive_failures > window // 2:
            raise NumericalFailure(
                "sampler",
                f"{state.consecutive_failures} consecutive proposals failed numerically at iteration {it}",
            )
        sampler.gibbs_beta(state, rng)
        if it < config.n_burn:
            win_acc += state.accepted - acc0
            win_prop += 1
            history.append(state.phi.copy())
            if win_prop == window:
                sampler.scale = float(adapt_proposals(sampler.scale, win_acc / win_prop))
                win_acc = win_prop = 0
                if config.adapt_covariance:
                    _adapt_covariance(sampler, history, it, config)
        else:
            j = it - config.n_burn
            kept_acc += state.accepted - acc0
            kept_prop += 1
            rows[j] = params_to_row(state.params)
            lt[j] = state.log_target
            if j % config.thin == 0:
                g = state.ws.recover_latents(state.params.beta, rng)
                u_s, v_s = split_latents(g, state.ws.rr, whitened=True)
                lat_iters.append(it)
                u_draws.append(u_s)
                v_draws.append(v_s)
        if progress is not None:
            progress(it, state)

    return PosteriorChain(
        names=sampler.names,
        draws=rows,
        iterations=np.arange(config.n_burn, config.n_iter),
        latent_iterations=np.asarray(lat_iters, dtype=int),
        u_star=np.asarray(u_draws).reshape(len(u_draws), n_star),
        v_star=np.asarray(v_draws).reshape(len(v_draws), knots.n_v),
        log_target=lt,
        accept_rate=kept_acc / max(kept_prop, 1),
        n_failures=state.failures,
        seed=seed if isinstance(seed, (int, np.integer)) else None,
        wall_time=time.perf_counter() - t0,
        shape=(data.n_x, knots.n_x, data.p_y),
    )


def _adapt_covariance(sampler, history, it, config):
    """At 1/4, 1/2 and 3/4 of burn-in, replace the proposal shape by the
    empirical covariance of the latter half of the history so far."""
    n = len(history)
    d = sampler.dim
    checkpoints = {
        (config.n_burn * q // 4) // config.adapt_window * config.adapt_window for q in (1, 2, 3)
    }
    if n not in checkpoints or n < 2 * d:
        return
    H = np.asarray(history[n // 2:])
    S = np.cov(H, rowvar=False) + 1e-8 * np.eye(d)
    try:
        Lc = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return
    sampler.prop_chol = (2.38 / math.sqrt(d)) * Lc
    sampler.scale = 1.0


def _chain_job(args):
    data, knots, priors, config, seed = args
    return run_chain(data, knots, priors, config, seed=seed)


def chain_seeds(seed, n_chains):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def run_chains(data, knots, priors, config, n_jobs=1):
    """Independent chains with seeds spawned from ``config.seed``."""
    seeds = chain_seeds(config.seed, config.n_chains)
    jobs = [(data, knots, priors, config, s) for s in seeds]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def gelman_rubin(chains):
    """Potential scale reduction factor for equal-length scalar chains."""
    x = np.asarray(chains, dtype=float)
    m, n = x.shape
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    var_hat = (n - 1) / n * W + B / n
    return float(math.sqrt(var_hat / W))


def credible_interval(draws, level=0.95):
    lo = (1 - level) / 2
    return np.quantile(draws, [lo, 0.5, 1 - lo], axis=0)
