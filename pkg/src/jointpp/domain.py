"""Data containers and dataset assembly.

Signals are stored grouped by plot (in plot-table order) and sorted by
height within a plot, so balanced data follow ``i = j * n_x + k``
(zero-based).
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError


class SpaceHeightCoord(NamedTuple):
    s1: float
    s2: float
    x: float

    @property
    def s(self):
        return (self.s1, self.s2)


@dataclass(frozen=True)
class DesignSpec:
    """Mean-structure terms for the outcome and the signal.

    ``y_terms`` may hold ``"1"`` and covariate names. ``z_terms`` may
    also hold ``"height"``, which expands to one intercept per observed
    height.
    """

    y_terms: tuple = ("1",)
    z_terms: tuple = ("1",)

    @classmethod
    def parse(cls, y_formula="1", z_formula="1"):
        def split(f):
            terms = tuple(t.strip() for t in str(f).split("+") if t.strip())
            if not terms:
                raise ConfigError(f"empty design formula {f!r}")
            if len(set(terms)) != len(terms):
                raise ConfigError(f"repeated term in design formula {f!r}")
            return terms

        y_terms, z_terms = split(y_formula), split(z_formula)
        if "height" in y_terms:
            raise ConfigError("'height' is only valid in the signal design")
        if "height" in z_terms and "1" in z_terms:
            raise ConfigError("'height' already spans the intercept; drop '1'")
        return cls(y_terms, z_terms)

    @property
    def y_formula(self):
        return "+".join(self.y_terms)

    @property
    def z_formula(self):
        return "+".join(self.z_terms)

    @property
    def covariates(self):
        names = [t for t in self.y_terms + self.z_terms if t not in ("1", "height")]
        return tuple(dict.fromkeys(names))

    def y_names(self):
        return ["1" if t == "1" else t for t in self.y_terms]

    def z_names(self, n_x):
        names = []
        for t in self.z_terms:
            if t == "height":
                names.extend(f"h{k + 1}" for k in range(n_x))
            else:
                names.append(t)
        return names

    def q_y(self, covariates):
        """Rows ``q_y(s)`` for plots with the given covariate columns."""
        m = _nrows(covariates)
        cols = []
        for t in self.y_terms:
            cols.append(np.ones(m) if t == "1" else _covariate(covariates, t))
        return np.column_stack(cols)

    def q_z(self, height_index, covariates, n_x):
        """Rows ``q_z(l)``; ``covariates`` are the values at each signal's plot."""
        height_index = np.asarray(height_index, dtype=int)
        m = height_index.shape[0]
        cols = []
        for t in self.z_terms:
            if t == "1":
                cols.append(np.ones((m, 1)))
            elif t == "height":
                onehot = np.zeros((m, n_x))
                onehot[np.arange(m), height_index] = 1.0
                cols.append(onehot)
            else:
                cols.append(_covariate(covariates, t)[:, None])
        return np.hstack(cols)


def _nrows(covariates):
    for v in covariates.values():
        return len(v)
    raise ValueError("covariate table has no columns; pass {'_n': array} for intercept-only")


def _covariate(covariates, name):
    if name not in covariates:
        raise DataError(f"design requires covariate {name!r} which is not provided")
    v = np.asarray(covariates[name], dtype=float)
    if not np.all(np.isfinite(v)):
        bad = np.flatnonzero(~np.isfinite(v)).tolist()
        raise DataError(f"covariate {name!r} missing at rows {bad}")
    return v


@dataclass(frozen=True, eq=False)
class JointDataset:
    """Misaligned outcome/signal observations with their design matrices."""

    plot_locations: np.ndarray
    y: np.ndarray
    signal_coords: np.ndarray
    z: np.ndarray
    heights: np.ndarray
    plot_index: np.ndarray
    height_index: np.ndarray
    Q_y: np.ndarray
    Q_z: np.ndarray
    design: DesignSpec = DesignSpec()
    covariates: dict = field(default_factory=dict)
    max_height: float = np.inf
    y_center: float = 0.0
    y_scale: float = 1.0

    @property
    def n_s(self):
        return self.plot_locations.shape[0]

    @property
    def n(self):
        return self.signal_coords.shape[0]

    @property
    def n_x(self):
        return self.heights.shape[0]

    @property
    def p_y(self):
        return self.Q_y.shape[1]

    @property
    def p_z(self):
        return self.Q_z.shape[1]

    @property
    def is_balanced(self):
        return self.n == self.n_s * self.n_x

    def plot_covariates(self, rows=None):
        cov = {k: np.asarray(v) for k, v in self.covariates.items()}
        cov["_n"] = np.zeros(self.n_s)
        if rows is not None:
            cov = {k: v[rows] for k, v in cov.items()}
        return cov

    def subset_plots(self, rows):
        """Dataset restricted to the plots ``rows`` (order preserved)."""
        rows = np.sort(np.asarray(rows, dtype=int))
        remap = -np.ones(self.n_s, dtype=int)
        remap[rows] = np.arange(rows.size)
        keep = remap[self.plot_index] >= 0
        return replace(
            self,
            plot_locations=self.plot_locations[rows],
            y=self.y[rows],
            signal_coords=self.signal_coords[keep],
            z=self.z[keep],
            plot_index=remap[self.plot_index[keep]],
            height_index=self.height_index[keep],
            Q_y=self.Q_y[rows],
            Q_z=self.Q_z[keep],
            covariates={k: np.asarray(v)[rows] for k, v in self.covariates.items()},
        )

    def to_tables(self):
        """Plot and signal tables in the on-disk column layout."""
        plots = pd.DataFrame(
            {
                "s1": self.plot_locations[:, 0],
                "s2": self.plot_locations[:, 1],
                "y": self.y * self.y_scale + self.y_center,
            }
        )
        for k, v in self.covariates.items():
            plots[k] = v
        signals = pd.DataFrame(self.signal_coords, columns=["s1", "s2", "x"])
        signals["z"] = self.z
        return plots, signals


@dataclass
class ModelParams:
    """All unknowns of the joint model on their natural scale."""

    sigma2_u: float
    a: float
    gamma: float
    c: float
    sigma2_v: float
    phi_v: float
    tau2_y: float
    tau2_z: np.ndarray
    alpha: np.ndarray
    beta_y: np.ndarray
    beta_z: np.ndarray

    def __post_init__(self):
        self.tau2_z = np.atleast_1d(np.asarray(self.tau2_z, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.beta_y = np.atleast_1d(np.asarray(self.beta_y, dtype=float))
        self.beta_z = np.atleast_1d(np.asarray(self.beta_z, dtype=float))

    def is_valid(self):
        pos = [self.sigma2_u, self.a, self.c, self.sigma2_v, self.phi_v, self.tau2_y]
        return (
            all(np.isfinite(p) and p > 0 for p in pos)
            and 0.0 <= self.gamma <= 1.0
            and bool(np.all(self.tau2_z > 0))
            and bool(np.all(np.isfinite(self.alpha)))
        )

    @property
    def theta_u(self):
        return (self.sigma2_u, self.a, self.gamma, self.c)

    @property
    def theta_v(self):
        return (self.sigma2_v, self.phi_v)

    @property
    def beta(self):
        """``beta_z`` stacked over ``beta_y``."""
        return np.concatenate([self.beta_z, self.beta_y])

    def with_beta(self, beta):
        p_z = self.beta_z.size
        return replace(self, beta_z=np.array(beta[:p_z]), beta_y=np.array(beta[p_z:]))

    def copy(self):
        return replace(
            self,
            tau2_z=self.tau2_z.copy(),
            alpha=self.alpha.copy(),
            beta_y=self.beta_y.copy(),
            beta_z=self.beta_z.copy(),
        )


def assemble_dataset(plots, signals, design=None, *, max_height=None, standardize=False):
    """Build a :class:`JointDataset` from plot and signal tables.

    Parameters
    ----------
    plots : DataFrame
        Columns ``s1, s2, y`` plus any covariates.
    signals : DataFrame
        Columns ``s1, s2, x, z``. Every signal location must be a plot
        location.
    design : DesignSpec, optional
        Intercept-only for both processes when omitted.
    max_height : float, optional
        Declared top of the height interval; defaults to the largest
        observed height.
    standardize : bool
        Center and scale ``y`` to unit variance.
    """
    design = design or DesignSpec()
    plots = pd.DataFrame(plots).reset_index(drop=True)
    signals = pd.DataFrame(signals).reset_index(drop=True)
    for col in ("s1", "s2", "y"):
        if col not in plots:
            raise DataError(f"plot table lacks column {col!r}")
    for col in ("s1", "s2", "x", "z"):
        if col not in signals:
            raise DataError(f"signal table lacks column {col!r}")

    locs = plots[["s1", "s2"]].to_numpy(dtype=float)
    y = plots["y"].to_numpy(dtype=float)
    if not np.all(np.isfinite(locs)) or not np.all(np.isfinite(y)):
        raise DataError("plot table has non-finite coordinates or outcomes")
    loc_key = {tuple(p): j for j, p in enumerate(map(tuple, locs))}
    if len(loc_key) != len(locs):
        raise DataError("duplicate plot locations")

    sc = signals[["s1", "s2", "x"]].to_numpy(dtype=float)
    zv = signals["z"].to_numpy(dtype=float)
    if not np.all(np.isfinite(sc)) or not np.all(np.isfinite(zv)):
        raise DataError("signal table has non-finite values")
    if np.any(sc[:, 2] < 0):
        raise DataError("negative signal heights")
    dup = signals.duplicated(subset=["s1", "s2", "x"], keep=False)
    if dup.any():
        rows = signals.loc[dup, ["s1", "s2", "x"]].drop_duplicates()
        listing = "; ".join(f"s=({r.s1:g},{r.s2:g}) x={r.x:g}" for r in rows.itertuples())
        raise DataError(f"duplicate signal coordinates: {listing}")

    plot_index = np.empty(len(sc), dtype=int)
    for i, (s1, s2, _) in enumerate(sc):
        j = loc_key.get((s1, s2))
        if j is None:
            raise DataError(f"signal at s=({s1:g},{s2:g}) has no matching plot")
        plot_index[i] = j

    heights = np.unique(sc[:, 2])
    M = float(heights[-1]) if max_height is None else float(max_height)
    if heights[-1] > M:
        raise DataError(f"signal height {heights[-1]:g} exceeds max height {M:g}")
    height_index = np.searchsorted(heights, sc[:, 2])

    order = np.lexsort((height_index, plot_index))
    sc, zv = sc[order], zv[order]
    plot_index, height_index = plot_index[order], height_index[order]

    covariates = {}
    for name in design.covariates:
        if name not in plots:
            raise DataError(f"design requires covariate {name!r} absent from plot table")
        covariates[name] = plots[name].to_numpy(dtype=float)
    extra = [c for c in plots.columns if c not in ("s1", "s2", "y") and c not in covariates]
    for name in extra:
        covariates[name] = pd.to_numeric(plots[name], errors="coerce").to_numpy(dtype=float)

    plot_cov = {k: v for k, v in covariates.items()}
    plot_cov["_n"] = np.zeros(len(locs))
    Q_y = design.q_y(plot_cov)
    sig_cov = {k: v[plot_index] for k, v in plot_cov.items()}
    Q_z = design.q_z(height_index, sig_cov, heights.size)
    _check_rank(Q_y, "Q_y")
    _check_rank(Q_z, "Q_z")

    center, scale = 0.0, 1.0
    if standardize:
        center, scale = float(y.mean()), float(y.std())
        if scale <= 0:
            raise DataError("cannot standardize a constant outcome")
        y = (y - center) / scale

    return JointDataset(
        plot_locations=locs,
        y=y,
        signal_coords=sc,
        z=zv,
        heights=heights,
        plot_index=plot_index,
        height_index=height_index,
        Q_y=Q_y,
        Q_z=Q_z,
        design=design,
        covariates=covariates,
        max_height=M,
        y_center=center,
        y_scale=scale,
    )


def _check_rank(Q, name):
    if Q.shape[0] < Q.shape[1] or np.linalg.matrix_rank(Q) < Q.shape[1]:
        raise DataError(f"design matrix {name} ({Q.shape[0]}x{Q.shape[1]}) lacks full column rank")


def holdout_split(data, fraction, seed):
    """Randomly partition plot locations into (train, holdout).

    The holdout receives ``round(fraction * n_s)`` locations together with
    their signals.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n_hold = int(round(fraction * data.n_s))
    if n_hold == 0 or n_hold == data.n_s:
        raise DataError(f"fraction {fraction} leaves an empty partition of {data.n_s} locations")
    perm = np.random.default_rng(seed).permutation(data.n_s)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return data.subset_plots(train), data.subset_plots(hold)


def read_tables(plots_path, signals_path):
    try:
        return pd.read_csv(plots_path), pd.read_csv(signals_path)
    except FileNotFoundError as exc:
        raise DataError(f"cannot read {exc.filename}") from None
