"""Collapsed joint likelihood ``N(w | Q beta, A J A' + D)`` evaluated through
low-rank factorizations, the Gibbs draw for beta, and exact recovery of the
latent knot effects.

Shapes: ``N = n + n_s`` stacked observations (signals first), ``p = n* + n_v*``
latent knot effects (u* first).
"""

import math

import numpy as np
import scipy.linalg as sla

from .errors import NumericalFailure

LOG2PI = math.log(2.0 * math.pi)
J_JITTER = 1e-10


def _chol(M, stage):
    try:
        return sla.cholesky(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalFailure(stage, "matrix not positive definite") from None


def _trsolve(L, B, trans=False):
    return sla.solve_triangular(L, B, lower=True, trans="T" if trans else "N", check_finite=False)


def stack_A(B_u, G, B_v):
    """Block basis ``[[B_u, 0], [G, B_v]]``."""
    n, n_star = B_u.shape
    top = np.hstack([B_u, np.zeros((n, B_v.shape[1]))])
    return np.vstack([top, np.hstack([G, B_v])])


class CollapsedWorkspace:
    """Factorizations shared by the likelihood, the beta draw and latent recovery.

    Parameters
    ----------
    A : (N, p) array
    J_blocks : sequence of (k, k) arrays
        Diagonal blocks of ``J`` (``C_u*`` then ``C_v*``).
    d : (N,) array
        Diagonal of ``D``; strictly positive.
    Q : (N, q) array
    w : (N,) array
    J_chols : sequence of arrays, optional
        Lower Cholesky factors of the ``J`` blocks, if already available.
    """

    def __init__(self, A, J_blocks, d, Q, w, J_chols=None):
        d = np.asarray(d, dtype=float)
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise NumericalFailure("D", "noise variances must be strictly positive")
        self.A = np.asarray(A, dtype=float)
        self.d = d
        self.Q = np.asarray(Q, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.sd = np.sqrt(d)
        self.W = self.A / self.sd[:, None]
        self.WtW = self.W.T @ self.W
        self.is_whitened = J_blocks is None
        if self.is_whitened:
            self.J_blocks = [np.eye(self.A.shape[1])]
            self.L = _chol(np.eye(self.p) + self.WtW, "L")
            self.J_chols = self.J_blocks
            # log|I - HH'| = -2 log|L| when J = I
            self._logdet_T = -np.sum(np.log(np.diag(self.L)))
            self._T = None
        else:
            self.J_blocks = [np.asarray(b, dtype=float) for b in J_blocks]
            chols = J_chols if J_chols is not None else [_chol(b, "J") for b in self.J_blocks]
            self._factor(chols)

    @classmethod
    def whitened(cls, A, d, Q, w):
        """Workspace with ``J = I``; ``A`` must already carry the knot covariance."""
        return cls(A, None, d, Q, w)

    @property
    def J(self):
        return sla.block_diag(*self.J_blocks)

    @property
    def p(self):
        return self.A.shape[1]

    @property
    def T(self):
        """``chol(I - H H')``."""
        if self._T is None:
            X = _trsolve(self.L, np.eye(self.p))
            self._T = _chol(X @ X.T, "T")
        return self._T

    def _factor(self, chols):
        """``L = chol(J^-1 + W'W)`` and ``T = chol(I - H H')``.

        ``I - H H' = L^-1 J^-1 L^-T`` exactly, which is assembled from the
        triangular inverse of ``chol(J)`` to avoid forming ``I - H H'`` by
        subtraction.
        """
        for attempt in range(2):
            Rinv = sla.block_diag(*[_trsolve(R, np.eye(R.shape[0])) for R in chols])
            Jinv = Rinv.T @ Rinv
            try:
                self.L = sla.cholesky(Jinv + self.WtW, lower=True, check_finite=False)
                break
            except np.linalg.LinAlgError:
                if attempt == 1:
                    raise NumericalFailure("L", "J^-1 + W'W not positive definite") from None
                J = self.J
                jit = J_JITTER * np.trace(J) / J.shape[0]
                self.J_blocks = [b + jit * np.eye(b.shape[0]) for b in self.J_blocks]
                chols = [_chol(b, "J") for b in self.J_blocks]
        self.J_chols = chols
        X = _trsolve(self.L, Rinv.T)
        self._T = _chol(X @ X.T, "T")
        self._logdet_T = np.sum(np.log(np.diag(self._T)))

    def Wt_dot(self, x):
        return self.W.T @ x

    @property
    def H(self):
        """``trsolve(L, W')``; formed on demand only."""
        return _trsolve(self.L, self.W.T)

    def residual_terms(self, beta):
        e = self.w - self.Q @ beta
        m = e / self.sd
        Nv = _trsolve(self.L, self.Wt_dot(m))
        return e, m, Nv

    def loglik(self, beta):
        """``log N(w | Q beta, A J A' + D)``."""
        _, m, Nv = self.residual_terms(beta)
        quad = m @ m - Nv @ Nv
        logdet_half = 0.5 * np.sum(np.log(self.d)) - self._logdet_T
        return -0.5 * self.w.size * LOG2PI - logdet_half - 0.5 * quad

    def beta_conditional(self, prior_mean, prior_prec):
        """Precision Cholesky ``L_B`` and linear term ``b`` of beta's full conditional."""
        X = self.Q / self.sd[:, None]
        x = self.w / self.sd
        Xt = _trsolve(self.L, self.Wt_dot(X))
        Hx = _trsolve(self.L, self.Wt_dot(x))
        prec = prior_prec + X.T @ X - Xt.T @ Xt
        prec = 0.5 * (prec + prec.T)
        b = prior_prec @ prior_mean + X.T @ x - Xt.T @ Hx
        return _chol(prec, "beta_precision"), b

    def sample_beta(self, prior_mean, prior_prec, rng):
        L_B, b = self.beta_conditional(prior_mean, prior_prec)
        mean = _trsolve(L_B, _trsolve(L_B, b), trans=True)
        return mean + _trsolve(L_B, rng.standard_normal(b.size), trans=True)

    def latent_conditional(self, beta):
        """Mean ``B b`` and covariance ``B`` of ``g = (u*, v*)`` given everything else.

        Uses ``B = K - K (J + K)^-1 K`` with ``K^-1 = A' D^-1 A`` so that no
        inverse of a knot covariance is needed. In whitened coordinates
        ``J = I`` and ``B = (I + W'W)^-1`` comes straight from ``L``, which
        stays stable when some knots carry little data.
        """
        _, m, _ = self.residual_terms(beta)
        b = self.Wt_dot(m)
        if self.is_whitened:
            Li = _trsolve(self.L, np.eye(self.p))
            return Li.T @ (Li @ b), Li.T @ Li
        try:
            Lk = sla.cholesky(self.WtW, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            colnorm = np.linalg.norm(self.W, axis=0)
            unused = np.flatnonzero(colnorm <= 1e-12 * max(colnorm.max(), 1e-300)).tolist()
            raise NumericalFailure("K", f"A'D^-1A singular; knots with no data support: {unused}") from None
        K = sla.cho_solve((Lk, True), np.eye(self.p), check_finite=False)
        K = 0.5 * (K + K.T)
        L2 = _chol(self.J + K, "J+K")
        W2 = _trsolve(L2, K)
        B = K - W2.T @ W2
        B = 0.5 * (B + B.T)
        return B @ b, B

    def recover_latents(self, beta, rng):
        if self.is_whitened:
            _, m, Nv = self.residual_terms(beta)
            return _trsolve(self.L, Nv + rng.standard_normal(self.p), trans=True)
        mean, B = self.latent_conditional(beta)
        return mean + _psd_factor(B) @ rng.standard_normal(mean.size)


class WhitenedWorkspace(CollapsedWorkspace):
    """Workspace in whitened knot coordinates that exploits the block layout

    ``W = D^-1/2 [[Vu', 0], [Gw, Vv']]`` without forming it.
    """

    def __init__(self, Vu, Gw, Vv, d_z, d_y, Q, w):
        d = np.concatenate([d_z, d_y])
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise NumericalFailure("D", "noise variances must be strictly positive")
        self.d = d
        self.Q = np.asarray(Q, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.sd = np.sqrt(d)
        self.n_z = d_z.size
        self._sz = self.sd[: self.n_z]
        self._sy = self.sd[self.n_z:]
        self._Vu, self._Gw, self._Vv = Vu, Gw, Vv
        self._Wu = Vu / self._sz
        Gs = Gw / self._sy[:, None]
        Vs = Vv / self._sy
        nu = Vu.shape[0]
        p = nu + Vv.shape[0]
        WtW = np.empty((p, p))
        WtW[:nu, :nu] = self._Wu @ self._Wu.T + Gs.T @ Gs
        WtW[:nu, nu:] = Gs.T @ Vs.T
        WtW[nu:, :nu] = WtW[:nu, nu:].T
        WtW[nu:, nu:] = Vs @ Vs.T
        self.WtW = WtW
        self._p = p
        self.is_whitened = True
        self.J_blocks = [np.eye(p)]
        self.J_chols = self.J_blocks
        M = WtW.copy()
        M[np.diag_indices(p)] += 1.0
        self.L = _chol(M, "L")
        self._logdet_T = -np.sum(np.log(np.diag(self.L)))
        self._T = None

    @property
    def p(self):
        return self._p

    @property
    def A(self):
        return stack_A(self._Vu.T, self._Gw, self._Vv.T)

    @property
    def W(self):
        return self.A / self.sd[:, None]

    def Wt_dot(self, x):
        x = np.asarray(x, dtype=float)
        xz = x[: self.n_z]
        xy = x[self.n_z:]
        xy = xy / (self._sy if xy.ndim == 1 else self._sy[:, None])
        top = self._Wu @ xz + self._Gw.T @ xy
        return np.concatenate([top, self._Vv @ xy])


def _psd_factor(B):
    """Cholesky factor, falling back to a clipped eigen square root for
    numerically semidefinite matrices."""
    try:
        return sla.cholesky(B, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        lam, U = np.linalg.eigh(B)
        return U * np.sqrt(np.clip(lam, 0.0, None))


def build_workspace(params, rr, data, whitened=False):
    """Workspace for the joint data under ``params`` and its structure ``rr``.

    With ``whitened=True`` the latent effects are expressed in the
    coordinates ``g' = chol(J)^-1 g``, so ``J = I`` and ``A`` becomes
    ``A chol(J)``. The marginal covariance of ``w`` is unchanged.
    """
    d = np.concatenate([rr.d_z2, rr.d_y2])
    Q = sla.block_diag(data.Q_z, data.Q_y)
    w = np.concatenate([data.z, data.y])
    if whitened:
        return WhitenedWorkspace(rr.Vu, rr.Gw, rr.Vv, rr.d_z2, rr.d_y2, Q, w)
    A = stack_A(rr.B_u, rr.G, rr.B_v)
    return CollapsedWorkspace(
        A, [rr.C_u_star, rr.C_v_star], d, Q, w, J_chols=[rr.chol_u_star, rr.chol_v_star]
    )


def log_collapsed_likelihood(params, rr, data):
    """Collapsed log-likelihood; priors are not included."""
    return build_workspace(params, rr, data).loglik(params.beta)


def sample_beta(params, rr, data, prior_mean, prior_cov, rng):
    """Exact draw of ``beta = (beta_z, beta_y)`` from its full conditional."""
    prior_prec = np.linalg.inv(prior_cov)
    return build_workspace(params, rr, data).sample_beta(prior_mean, prior_prec, rng)


def recover_latents(params, rr, data, rng, whitened=True):
    """One draw of ``(u*, v*)`` from their conditional given parameters and data."""
    ws = build_workspace(params, rr, data, whitened=whitened)
    return split_latents(ws.recover_latents(params.beta, rng), rr, whitened)


def split_latents(g, rr, whitened):
    n_star = rr.Lu.shape[0]
    u, v = g[:n_star], g[n_star:]
    if whitened:
        u, v = rr.Lu @ u, rr.Lv @ v
    return u, v
