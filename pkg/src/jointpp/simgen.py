"""Synthetic joint datasets drawn from the full (dense) model."""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .domain import DesignSpec, ModelParams, assemble_dataset
from .errors import NumericalFailure
from .kernels import ExponentialKernel, GneitingKernel

DENSE_CAP = 20000

# Outcome noise variance for the desk replica of the simulation study; the
# published table does not list one.
TABLE1_TAU2_Y = 1.0


def beta_z_profile(x, M):
    """Smooth unimodal height profile used for the signal intercepts."""
    return 0.5 + 2.0 * np.exp(-0.5 * ((np.asarray(x) - 0.5 * M) / (0.2 * M)) ** 2)


def tau2_z_profile(x, M):
    """Slowly increasing signal noise variance."""
    return 0.05 + 0.05 * np.asarray(x) / M


@dataclass
class SimConfig:
    """Regular plot grid on ``[lo, hi]^2`` and ``n_heights`` heights on ``[0, M]``.

    ``alpha_heights`` are the heights at which the outcome loads on u; they
    need not be among the observed heights.
    """

    n_side: int
    n_heights: int
    params: ModelParams
    alpha_heights: np.ndarray
    domain: tuple = (0.0, 4.0)
    max_height: float = 5.0
    y_design: str = "1"
    z_design: str = "height"
    seed: int = 0
    max_dense: int = DENSE_CAP
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_side < 1 or self.n_heights < 1:
            raise ValueError("grid sizes must be >= 1")
        self.alpha_heights = np.atleast_1d(np.asarray(self.alpha_heights, dtype=float))
        if self.params.alpha.size != self.alpha_heights.size:
            raise ValueError("alpha and alpha_heights differ in length")

    @property
    def plot_locations(self):
        g = np.linspace(self.domain[0], self.domain[1], self.n_side)
        return np.array([(a, b) for a in g for b in g])

    @property
    def heights(self):
        if self.n_heights == 1:
            return np.array([0.0])
        return np.linspace(0.0, self.max_height, self.n_heights)

    def describe(self):
        """Flat key-value record of every truth, including the height profiles."""
        p = self.params
        rec = {
            "n_side": self.n_side,
            "n_heights": self.n_heights,
            "domain_lo": self.domain[0],
            "domain_hi": self.domain[1],
            "max_height": self.max_height,
            "seed": self.seed,
            "sigma2_u": p.sigma2_u,
            "a": p.a,
            "gamma": p.gamma,
            "c": p.c,
            "sigma2_v": p.sigma2_v,
            "phi_v": p.phi_v,
            "tau2_y": p.tau2_y,
        }
        rec.update({f"alpha_{k + 1}": v for k, v in enumerate(p.alpha)})
        rec.update({f"alpha_height_{k + 1}": v for k, v in enumerate(self.alpha_heights)})
        rec.update({f"beta_y_{k + 1}": v for k, v in enumerate(p.beta_y)})
        rec.update({f"beta_z_{k + 1}": v for k, v in enumerate(p.beta_z)})
        rec.update({f"tau2_z_{k + 1}": v for k, v in enumerate(p.tau2_z)})
        return rec


def table1_experiment(scale=1, seed=0):
    """Simulation-study configuration with grid sizes divided by ``scale``.

    ``scale=1`` gives a 20 x 20 plot grid and 50 heights on ``[0, 5]``.
    """
    n_side = max(1, round(20 / scale))
    n_x = max(1, round(50 / scale))
    M = 5.0
    heights = np.linspace(0.0, M, n_x)
    params = ModelParams(
        sigma2_u=0.2,
        a=12.0,
        gamma=0.9,
        c=5.0,
        sigma2_v=0.5,
        phi_v=2.0,
        tau2_y=TABLE1_TAU2_Y,
        tau2_z=tau2_z_profile(heights, M),
        alpha=np.array([-2.0, 0.0, 2.0, 1.0, 5.0]),
        beta_y=np.array([20.0]),
        beta_z=beta_z_profile(heights, M),
    )
    return SimConfig(
        n_side=n_side,
        n_heights=n_x,
        params=params,
        alpha_heights=np.linspace(0.0, M, 5),
        max_height=M,
        seed=seed,
    )


def _draw_gp(cov, rng, stage):
    n = cov.shape[0]
    try:
        L = sla.cholesky(cov + 1e-10 * np.trace(cov) / n * np.eye(n), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalFailure(stage, "dense covariance not factorizable; increase jitter or coarsen the grid") from None
    return L @ rng.standard_normal(n)


def simulate_joint(config, covariates=None):
    """Draw one dataset from the full model.

    Returns
    -------
    data : JointDataset
    truth : dict
        ``u`` at the signal coordinates, ``u_alpha`` (plots x alpha heights),
        ``v`` at the plots, and the parameter record.
    """
    rng = np.random.default_rng(config.seed)
    p = config.params
    locs = config.plot_locations
    heights = config.heights
    n_s, n_x = locs.shape[0], heights.size

    union = np.union1d(heights, config.alpha_heights)
    n_u = n_s * union.size
    if n_u > config.max_dense:
        raise ValueError(f"dense simulation of {n_u} points exceeds max_dense={config.max_dense}")
    coords = np.column_stack([np.repeat(locs, union.size, axis=0), np.tile(union, n_s)])

    if p.sigma2_u > 0:
        ku = GneitingKernel(p.sigma2_u, p.a, p.gamma, p.c)
        u_all = _draw_gp(ku.matrix(coords), rng, "simulate_u").reshape(n_s, union.size)
    else:
        u_all = np.zeros((n_s, union.size))
    if p.sigma2_v > 0:
        v = _draw_gp(ExponentialKernel(p.sigma2_v, p.phi_v).matrix(locs), rng, "simulate_v")
    else:
        v = np.zeros(n_s)

    h_idx = np.searchsorted(union, heights)
    a_idx = np.searchsorted(union, config.alpha_heights)
    u = u_all[:, h_idx]
    u_alpha = u_all[:, a_idx]

    # independent noise streams for z and y
    z_rng, y_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    design = DesignSpec.parse(config.y_design, config.z_design)
    cov = dict(covariates or {})
    cov["_n"] = np.zeros(n_s)
    Q_y = design.q_y(cov)
    plot_index = np.repeat(np.arange(n_s), n_x)
    height_index = np.tile(np.arange(n_x), n_s)
    Q_z = design.q_z(height_index, {k: np.asarray(v_)[plot_index] for k, v_ in cov.items()}, n_x)

    tau_z = np.sqrt(np.asarray(p.tau2_z, dtype=float))[height_index]
    z = Q_z @ p.beta_z + u.ravel() + tau_z * z_rng.standard_normal(n_s * n_x)
    y = Q_y @ p.beta_y + u_alpha @ p.alpha + v + np.sqrt(p.tau2_y) * y_rng.standard_normal(n_s)

    plots = pd.DataFrame({"s1": locs[:, 0], "s2": locs[:, 1], "y": y})
    for k, val in (covariates or {}).items():
        plots[k] = val
    signals = pd.DataFrame(
        {"s1": locs[plot_index, 0], "s2": locs[plot_index, 1], "x": heights[height_index], "z": z}
    )
    data = assemble_dataset(plots, signals, design, max_height=config.max_height)
    truth = {"u": u.ravel(), "u_alpha": u_alpha, "v": v, "params": config.describe()}
    return data, truth


def truth_frames(data, truth):
    """Latent-truth and parameter tables for the sidecar CSVs."""
    lat = pd.DataFrame(data.signal_coords, columns=["s1", "s2", "x"])
    lat["u"] = truth["u"]
    plots = pd.DataFrame(data.plot_locations, columns=["s1", "s2"])
    plots["v"] = truth["v"]
    for k in range(truth["u_alpha"].shape[1]):
        plots[f"u_alpha_{k + 1}"] = truth["u_alpha"][:, k]
    params = pd.DataFrame({"name": list(truth["params"]), "value": list(truth["params"].values())})
    return lat, plots, params
