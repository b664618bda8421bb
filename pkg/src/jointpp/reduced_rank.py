"""Predictive-process bases, bias-adjustment variances and knot selection."""

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from math import comb

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import NumericalFailure
from .kernels import ExponentialKernel, GneitingKernel, safe_cholesky

NEG_TOL = 1e-12
MAX_EXHAUSTIVE = 10**6


@dataclass(frozen=True, eq=False)
class KnotSet:
    """Spatial knots for u and v plus height knots for u.

    ``joint_u`` enumerates ``(s*, x*)`` with the height index running
    fastest: row ``j * n_x_star + k``.
    """

    spatial_u: np.ndarray
    spatial_v: np.ndarray
    heights: np.ndarray

    def __post_init__(self):
        su = np.atleast_2d(np.asarray(self.spatial_u, dtype=float))
        sv = np.atleast_2d(np.asarray(self.spatial_v, dtype=float))
        h = np.atleast_1d(np.asarray(self.heights, dtype=float))
        if np.any(np.diff(h) <= 0):
            raise ValueError("height knots must be distinct and ascending")
        for name, pts in (("spatial_u", su), ("spatial_v", sv)):
            if len({tuple(p) for p in pts}) != len(pts):
                raise ValueError(f"duplicate coordinates in {name}")
        object.__setattr__(self, "spatial_u", su)
        object.__setattr__(self, "spatial_v", sv)
        object.__setattr__(self, "heights", h)

    @property
    def n_u(self):
        return self.spatial_u.shape[0]

    @property
    def n_v(self):
        return self.spatial_v.shape[0]

    @property
    def n_x(self):
        return self.heights.shape[0]

    @property
    def n_star(self):
        return self.n_u * self.n_x

    @property
    def joint_u(self):
        s = np.repeat(self.spatial_u, self.n_x, axis=0)
        x = np.tile(self.heights, self.n_u)
        return np.column_stack([s, x])


@dataclass(eq=False)
class ReducedRankStructure:
    """Everything the collapsed likelihood needs for one parameter value.

    Bases are held in whitened form: ``Vu = Lu^-1 C(knots, data)`` where
    ``Lu = chol(C_u*)``, so that ``B_u = Vu' Lu^-1`` and
    ``B_u C_u* B_u' = Vu' Vu``. ``Vp[j]`` is the whitened transpose of the
    ``n_x_star x n_star`` block ``B(s_j)``. The literal basis matrices are
    available as properties.
    """

    Lu: np.ndarray
    Lu_inv: np.ndarray
    Vu: np.ndarray
    Vp: np.ndarray
    Lv: np.ndarray
    Lv_inv: np.ndarray
    Vv: np.ndarray
    delta2_u: np.ndarray
    delta2_u_plot: np.ndarray
    delta2_v: np.ndarray
    Gw: np.ndarray
    d_z2: np.ndarray
    d_y2: np.ndarray

    @property
    def chol_u_star(self):
        return self.Lu

    @property
    def chol_v_star(self):
        return self.Lv

    @cached_property
    def C_u_star(self):
        return self.Lu @ self.Lu.T

    @cached_property
    def C_v_star(self):
        return self.Lv @ self.Lv.T

    @cached_property
    def B_u(self):
        return self.Vu.T @ self.Lu_inv

    @cached_property
    def B_plot(self):
        return np.einsum("jki,il->jkl", self.Vp, self.Lu_inv)

    @cached_property
    def B_v(self):
        return self.Vv.T @ self.Lv_inv

    @cached_property
    def G(self):
        return self.Gw @ self.Lu_inv


def _tri_inv(L, stage):
    Linv, info = sla.lapack.dtrtri(L, lower=1)
    if info != 0:
        raise NumericalFailure(stage, "singular Cholesky factor")
    return Linv


def _whiten(Linv, C_cross, variance, stage):
    """``V = L^-1 C_cross`` and the residual variances ``variance - |V_t|^2``."""
    V = Linv @ C_cross
    delta2 = variance - np.einsum("ij,ij->j", V, V)
    return V, _clamp(delta2, variance, stage)


def _basis_from_chol(L, C_cross, variance, stage):
    """Basis rows and residual variances given ``chol(C*)`` and ``C(knots, targets)``."""
    V = sla.solve_triangular(L, C_cross, lower=True, check_finite=False)
    B = sla.solve_triangular(L, V, lower=True, trans="T", check_finite=False).T
    delta2 = variance - np.einsum("ij,ij->j", V, V)
    return B, _clamp(delta2, variance, stage)


def _clamp(delta2, variance, stage):
    low = delta2 < 0
    if np.any(low):
        if np.min(delta2) < -NEG_TOL * variance:
            raise NumericalFailure(stage, f"negative residual variance {np.min(delta2):.3e}")
        delta2 = np.where(low, 0.0, delta2)
    return delta2


def build_basis(kernel, knots, targets):
    """Predictive-process basis at ``targets`` for the given knots.

    Row ``t`` of the returned basis solves ``C* b = c*(t)``; the second
    output holds ``C(t, t) - c*(t)' b``, clamped at zero. One Cholesky
    factorization of the knot covariance serves all targets.
    """
    knots = np.atleast_2d(np.asarray(knots, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    C_star = kernel.matrix(knots)
    C_star = 0.5 * (C_star + C_star.T)
    L, _ = safe_cholesky(C_star, kernel.variance, stage="knot_cov")
    return _basis_from_chol(L, kernel.matrix(knots, targets), kernel.variance, "delta2")


def gneiting_from_params(params):
    return GneitingKernel(params.sigma2_u, params.a, params.gamma, params.c)


def exponential_from_params(params):
    return ExponentialKernel(params.sigma2_v, params.phi_v)


class _HeightCoded:
    """Gneiting kernel evaluations where heights come from small grids.

    ``code`` indexes a (rows x cols) table of squared height gaps so the
    height-dependent powers are computed once per distinct pair.
    """

    def __init__(self, ds, h_rows, h_cols, code):
        self.ds = ds
        self.dx2 = (np.subtract.outer(h_rows, h_cols) ** 2).ravel()
        self.code = code

    def evaluate(self, k):
        f = k.a * self.dx2 + 1.0
        out = np.take(-k.c * f ** (-0.5 * k.gamma), self.code)
        out *= self.ds
        np.exp(out, out=out)
        out *= np.take(k.sigma2_u * f ** (-k.gamma), self.code)
        return out


class StructureBuilder:
    """Caches the knot/data geometry so that each parameter value only
    pays for kernel evaluations and dense products."""

    def __init__(self, data, knots):
        self.data = data
        self.knots = knots
        nxs = knots.n_x
        ku_s = np.repeat(np.arange(knots.n_u), nxs)
        ku_x = np.tile(np.arange(nxs), knots.n_u)
        self._ju = knots.joint_u

        ds_uu = cdist(knots.spatial_u, knots.spatial_u)
        self.kk = _HeightCoded(
            ds_uu[np.ix_(ku_s, ku_s)], knots.heights, knots.heights, (ku_x[:, None] * nxs + ku_x[None, :]).astype(np.intp)
        )
        ds_pu = cdist(data.plot_locations, knots.spatial_u)
        self.ks = _HeightCoded(
            ds_pu.T[np.ix_(ku_s, data.plot_index)],
            knots.heights,
            data.heights,
            ku_x[:, None] * data.n_x + data.height_index[None, :],
        )
        # targets (s_j, x*_k), plot major
        t_x = np.tile(np.arange(nxs), data.n_s)
        self.kp = _HeightCoded(
            np.repeat(ds_pu.T[ku_s], nxs, axis=1), knots.heights, knots.heights, ku_x[:, None] * nxs + t_x[None, :]
        )
        self.vv = cdist(knots.spatial_v, knots.spatial_v)
        self.vp = cdist(knots.spatial_v, data.plot_locations)

    def build(self, params):
        return assemble_from_geometry(params, self, self.data)

    def u_factor(self, params):
        """``(kernel, chol(C_u*), chol(C_u*)^-1)``."""
        k = gneiting_from_params(params)
        C = self.kk.evaluate(k)
        C = 0.5 * (C + C.T)
        L, _ = safe_cholesky(C, k.variance, stage="knot_cov_u")
        return k, L, _tri_inv(L, "knot_cov_u")

    def v_factor(self, params):
        k = exponential_from_params(params)
        C = k.from_distances(self.vv)
        L, _ = safe_cholesky(C, k.variance, stage="knot_cov_v")
        return k, L, _tri_inv(L, "knot_cov_v")

    def u_whitened(self, params, coords, factor=None):
        """Whitened cross-covariances and residual variances at space-height coords."""
        k, _, Linv = factor or self.u_factor(params)
        cross = k.matrix(self._ju, np.atleast_2d(np.asarray(coords, dtype=float)))
        return _whiten(Linv, cross, k.variance, "delta2_u")

    def v_whitened(self, params, locations, factor=None):
        k, _, Linv = factor or self.v_factor(params)
        cross = k.matrix(self.knots.spatial_v, np.atleast_2d(locations))
        return _whiten(Linv, cross, k.variance, "delta2_v")

    def plot_whitened(self, params, locations, factor=None):
        """Whitened ``B(s)`` blocks, shape ``(m, n_x_star, n_star)``, and
        ``delta2_u(s, x*_k)``."""
        locations = np.atleast_2d(np.asarray(locations, dtype=float))
        m, nx = locations.shape[0], self.knots.n_x
        coords = np.column_stack([np.repeat(locations, nx, axis=0), np.tile(self.knots.heights, m)])
        V, d2 = self.u_whitened(params, coords, factor)
        return V.T.reshape(m, nx, -1), d2.reshape(m, nx)

    def u_basis(self, params, coords, factor=None):
        """Literal basis rows ``b_u(l)'`` and ``delta2_u`` at space-height coords."""
        factor = factor or self.u_factor(params)
        V, d2 = self.u_whitened(params, coords, factor)
        return V.T @ factor[2], d2

    def v_basis(self, params, locations, factor=None):
        factor = factor or self.v_factor(params)
        V, d2 = self.v_whitened(params, locations, factor)
        return V.T @ factor[2], d2


def assemble_from_geometry(params, geo, data):
    ku, L_u, Li_u = geo.u_factor(params)
    Vu, delta2_u = _whiten(Li_u, geo.ks.evaluate(ku), ku.variance, "delta2_u")
    Vp_flat, d2_p = _whiten(Li_u, geo.kp.evaluate(ku), ku.variance, "delta2_u")
    n_xs = geo.knots.n_x
    Vp = Vp_flat.T.reshape(data.n_s, n_xs, -1)
    delta2_u_plot = d2_p.reshape(data.n_s, n_xs)

    kv, L_v, Li_v = geo.v_factor(params)
    Vv, delta2_v = _whiten(Li_v, kv.from_distances(geo.vp), kv.variance, "delta2_v")
    return _finish(params, data, L_u, Li_u, Vu, Vp, L_v, Li_v, Vv, delta2_u, delta2_u_plot, delta2_v)


def _finish(params, data, L_u, Li_u, Vu, Vp, L_v, Li_v, Vv, delta2_u, delta2_u_plot, delta2_v):
    alpha = params.alpha
    if alpha.size != Vp.shape[1]:
        raise ValueError(f"alpha has {alpha.size} entries, expected {Vp.shape[1]} (height knots)")
    Gw = np.einsum("jki,k->ji", Vp, alpha)
    d_z2 = params.tau2_z[data.height_index] + delta2_u
    d_y2 = params.tau2_y + delta2_u_plot @ alpha**2 + delta2_v
    return ReducedRankStructure(
        Lu=L_u,
        Lu_inv=Li_u,
        Vu=Vu,
        Vp=Vp,
        Lv=L_v,
        Lv_inv=Li_v,
        Vv=Vv,
        delta2_u=delta2_u,
        delta2_u_plot=delta2_u_plot,
        delta2_v=delta2_v,
        Gw=Gw,
        d_z2=d_z2,
        d_y2=d_y2,
    )


def assemble_structure(params, data, knots):
    """Reduced-rank structure for ``params`` without geometry caching.

    Every covariance is built directly from :mod:`kernels`;
    :class:`StructureBuilder` is the cached equivalent used by the sampler.
    """
    ku = gneiting_from_params(params)
    kv = exponential_from_params(params)
    ju = knots.joint_u
    C_u = ku.matrix(ju)
    L_u, _ = safe_cholesky(0.5 * (C_u + C_u.T), ku.variance, "knot_cov_u")
    Li_u = _tri_inv(L_u, "knot_cov_u")
    C_v = kv.matrix(knots.spatial_v)
    L_v, _ = safe_cholesky(C_v, kv.variance, "knot_cov_v")
    Li_v = _tri_inv(L_v, "knot_cov_v")
    Vu, delta2_u = _whiten(Li_u, ku.matrix(ju, data.signal_coords), ku.variance, "delta2_u")
    m, nx = data.n_s, knots.n_x
    plot_coords = np.column_stack([np.repeat(data.plot_locations, nx, axis=0), np.tile(knots.heights, m)])
    Vp, d2_p = _whiten(Li_u, ku.matrix(ju, plot_coords), ku.variance, "delta2_u")
    Vv, delta2_v = _whiten(Li_v, kv.matrix(knots.spatial_v, data.plot_locations), kv.variance, "delta2_v")
    return _finish(
        params, data, L_u, Li_u, Vu, Vp.T.reshape(m, nx, -1), L_v, Li_v, Vv,
        delta2_u, d2_p.reshape(m, nx), delta2_v,
    )


# -- knot selection ---------------------------------------------------------


def height_objective(kernel, heights, subset, s=(0.0, 0.0)):
    """Summed residual variance over all ``heights`` given knot ``subset``,
    evaluated at planar location ``s``."""
    heights = np.asarray(heights, dtype=float)
    pts = np.column_stack([np.tile(s, (heights.size, 1)), heights])
    _, d2 = build_basis(kernel, pts[list(subset)], pts)
    return float(d2.sum())


def select_height_knots(kernel, candidates, n_x_star, max_subsets=MAX_EXHAUSTIVE):
    """Choose ``n_x_star`` height knots minimizing summed residual variance.

    Exhaustive when the number of subsets is at most ``max_subsets``,
    greedy forward selection otherwise.

    Returns
    -------
    heights : ndarray
        Selected heights, ascending.
    objective : float
    exhaustive : bool
    """
    cand = np.asarray(candidates, dtype=float)
    n_x = cand.size
    if not 1 <= n_x_star <= n_x:
        raise ValueError(f"n_x_star={n_x_star} must lie in [1, {n_x}]")
    # stationarity: the objective does not depend on the planar location
    pts = np.column_stack([np.zeros((n_x, 2)), cand])
    K = kernel.matrix(pts)
    K = 0.5 * (K + K.T)
    var = kernel.variance
    total = float(np.trace(K))

    def batch_objective(subsets):
        idx = np.asarray(subsets)
        Css = K[idx[:, :, None], idx[:, None, :]] + 1e-12 * var * np.eye(idx.shape[1])
        Cs = K[idx]  # (b, m, n_x)
        L = np.linalg.cholesky(Css)
        V = np.linalg.solve(L, Cs)
        return total - np.einsum("bij,bij->b", V, V)

    if comb(n_x, n_x_star) <= max_subsets:
        best_val, best = np.inf, None
        it = combinations(range(n_x), n_x_star)
        while True:
            chunk = [c for _, c in zip(range(20000), it)]
            if not chunk:
                break
            vals = batch_objective(chunk)
            i = _first_min(vals)
            if vals[i] < best_val - _tie_tol(best_val, var):
                best_val, best = vals[i], chunk[i]
        return cand[list(best)], max(float(best_val), 0.0), True

    chosen = []
    for _ in range(n_x_star):
        rest = [k for k in range(n_x) if k not in chosen]
        vals = batch_objective([sorted(chosen + [k]) for k in rest])
        chosen.append(rest[_first_min(vals)])
    chosen.sort()
    return cand[chosen], max(float(batch_objective([chosen])[0]), 0.0), False


def _tie_tol(ref, var):
    return 1e-10 * max(abs(ref), var) if np.isfinite(ref) else 0.0


def _first_min(vals):
    m = np.min(vals)
    return int(np.flatnonzero(vals <= m + 1e-10 * max(abs(m), 1e-300))[0])


def _greedy_blocks(kernel, target_pts, cand_pts, block, n_select):
    """Greedy block-wise knot search.

    Candidate ``g`` contributes the points ``cand_pts[g*block:(g+1)*block]``.
    Residual covariances given the selected knots are maintained through
    incremental factor rows, so each step is a rank-``block`` update.
    """
    var = kernel.variance
    nT = target_pts.shape[0]
    nG = cand_pts.shape[0] // block
    allpts = np.vstack([target_pts, cand_pts])
    R_CT = kernel.matrix(cand_pts, target_pts).reshape(nG, block, nT)
    Kcc = kernel.matrix(cand_pts)
    R_cc = np.stack([Kcc[g * block:(g + 1) * block, g * block:(g + 1) * block] for g in range(nG)])
    t_res = np.full(nT, var)
    V = np.zeros((0, allpts.shape[0]))
    thr = 1e-10 * var
    chosen, trace = [], [float(t_res.sum())]
    for _ in range(n_select):
        lam, U = np.linalg.eigh(R_cc)
        proj = np.einsum("gbm,gbt->gmt", U, R_CT)
        inv = np.where(lam > thr, 1.0 / np.where(lam > thr, lam, 1.0), 0.0)
        gains = np.einsum("gm,gmt->g", inv, proj**2)
        gains[chosen] = -np.inf
        g = _first_max(gains)
        chosen.append(g)
        sl = slice(nT + g * block, nT + (g + 1) * block)
        Kc = kernel.matrix(allpts[sl], allpts)
        Rc = Kc - V[:, sl].T @ V
        lam_g, U_g = lam[g], U[g]
        keep = lam_g > thr
        Vnew = (U_g[:, keep] / np.sqrt(lam_g[keep])).T @ Rc
        V = np.vstack([V, Vnew])
        VT, VC = Vnew[:, :nT], Vnew[:, nT:].reshape(-1, nG, block)
        R_CT -= np.einsum("mgb,mt->gbt", VC, VT)
        R_cc -= np.einsum("mgb,mgc->gbc", VC, VC)
        t_res = t_res - np.einsum("mt,mt->t", VT, VT)
        trace.append(float(np.clip(t_res, 0.0, None).sum()))
    return chosen, trace


def _first_max(vals):
    m = np.max(vals)
    return int(np.flatnonzero(vals >= m - 1e-10 * max(abs(m), 1e-300))[0])


def select_spatial_knots_u(kernel, plot_locations, heights_star, candidates, n_u_star):
    """Greedy spatial knots for u given the height knots.

    Minimizes the summed residual variance of u at every plot and knot
    height. Returns ``(knots, objective_trace)``; the trace starts with the
    no-knot value.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if n_u_star > candidates.shape[0]:
        raise ValueError(f"n_u_star={n_u_star} exceeds {candidates.shape[0]} candidates")
    h = np.asarray(heights_star, dtype=float)
    nx = h.size
    locs = np.atleast_2d(plot_locations)
    targets = np.column_stack([np.repeat(locs, nx, axis=0), np.tile(h, locs.shape[0])])
    cpts = np.column_stack([np.repeat(candidates, nx, axis=0), np.tile(h, candidates.shape[0])])
    chosen, trace = _greedy_blocks(kernel, targets, cpts, nx, n_u_star)
    return candidates[chosen], trace


def select_spatial_knots_v(kernel, plot_locations, candidates, n_v_star):
    """Greedy spatial knots for v minimizing summed ``delta2_v`` over plots."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if n_v_star > candidates.shape[0]:
        raise ValueError(f"n_v_star={n_v_star} exceeds {candidates.shape[0]} candidates")
    chosen, trace = _greedy_blocks(kernel, np.atleast_2d(plot_locations), candidates, 1, n_v_star)
    return candidates[chosen], trace


def candidate_grid(points, n_per_axis):
    """Uniform grid over the bounding box of ``points``."""
    points = np.atleast_2d(points)
    lo, hi = points.min(axis=0), points.max(axis=0)
    g1 = np.linspace(lo[0], hi[0], n_per_axis)
    g2 = np.linspace(lo[1], hi[1], n_per_axis)
    return np.array([(a, b) for a in g1 for b in g2])


def spatial_u_objective(kernel, plot_locations, heights_star, spatial_knots):
    """Direct evaluation of the u spatial-knot objective (no greedy updates)."""
    h = np.asarray(heights_star, dtype=float)
    nx = h.size
    locs = np.atleast_2d(plot_locations)
    sk = np.atleast_2d(spatial_knots)
    targets = np.column_stack([np.repeat(locs, nx, axis=0), np.tile(h, locs.shape[0])])
    knots = np.column_stack([np.repeat(sk, nx, axis=0), np.tile(h, sk.shape[0])])
    return float(build_basis(kernel, knots, targets)[1].sum())


def spatial_v_objective(kernel, plot_locations, spatial_knots):
    return float(build_basis(kernel, spatial_knots, plot_locations)[1].sum())
