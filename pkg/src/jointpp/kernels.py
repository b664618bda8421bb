"""Covariance functions for the space-height process u and the spatial
process v.

Coordinates are plain arrays: planar points have shape ``(m, 2)`` and
space-height points have shape ``(m, 3)`` with columns ``(s1, s2, x)``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import NumericalFailure

JITTER_COV = 1e-8


@dataclass(frozen=True)
class GneitingKernel:
    """Nonseparable space-height covariance.

    ``C(l, l') = s2 / f^g * exp(-c |ds| / f^(g/2))`` with
    ``f = a |dx|^2 + 1``. ``gamma = 0`` gives the separable product of an
    exponential in space and a Cauchy-type term in height.
    """

    sigma2_u: float
    a: float
    gamma: float
    c: float

    def __post_init__(self):
        if not (self.sigma2_u > 0 and self.a > 0 and self.c > 0):
            raise ValueError("sigma2_u, a and c must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def variance(self):
        return self.sigma2_u

    def from_distances(self, ds, dx2):
        """Evaluate on precomputed spatial distances and squared height gaps."""
        f = self.a * dx2 + 1.0
        return self.sigma2_u * f ** (-self.gamma) * np.exp(-self.c * ds * f ** (-0.5 * self.gamma))

    def __call__(self, l1, l2):
        l1 = np.asarray(l1, dtype=float)
        l2 = np.asarray(l2, dtype=float)
        ds = np.hypot(l1[0] - l2[0], l1[1] - l2[1])
        dx2 = (l1[2] - l2[2]) ** 2
        return float(self.from_distances(ds, dx2))

    def matrix(self, coords_a, coords_b=None):
        coords_a = np.atleast_2d(np.asarray(coords_a, dtype=float))
        coords_b = coords_a if coords_b is None else np.atleast_2d(np.asarray(coords_b, dtype=float))
        ds = cdist(coords_a[:, :2], coords_b[:, :2])
        dx2 = np.subtract.outer(coords_a[:, 2], coords_b[:, 2]) ** 2
        return self.from_distances(ds, dx2)


@dataclass(frozen=True)
class ExponentialKernel:
    """Isotropic exponential covariance ``sigma2_v * exp(-phi_v * d)``."""

    sigma2_v: float
    phi_v: float

    def __post_init__(self):
        if not (self.sigma2_v > 0 and self.phi_v > 0):
            raise ValueError("sigma2_v and phi_v must be positive")

    @property
    def variance(self):
        return self.sigma2_v

    def from_distances(self, ds):
        return self.sigma2_v * np.exp(-self.phi_v * ds)

    def __call__(self, s1, s2):
        s1 = np.asarray(s1, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        return float(self.from_distances(np.hypot(s1[0] - s2[0], s1[1] - s2[1])))

    def matrix(self, coords_a, coords_b=None):
        coords_a = np.atleast_2d(np.asarray(coords_a, dtype=float))
        coords_b = coords_a if coords_b is None else np.atleast_2d(np.asarray(coords_b, dtype=float))
        return self.from_distances(cdist(coords_a[:, :2], coords_b[:, :2]))


def gneiting_cov(kernel, l1, l2):
    return kernel(l1, l2)


def exp_cov(kernel, s1, s2):
    return kernel(s1, s2)


def cov_matrix(kernel, coords_a, coords_b=None):
    """Cross-covariance matrix with entry ``(i, j) = kernel(a_i, b_j)``.

    Passing ``coords_b=None`` builds the square matrix of ``coords_a``,
    which is exactly symmetric.
    """
    K = kernel.matrix(coords_a, coords_b)
    if coords_b is None:
        K = 0.5 * (K + K.T)
    return K


def _closest_pair(K):
    """Indices of the most strongly correlated off-diagonal pair."""
    d = np.sqrt(np.diag(K))
    R = K / np.outer(d, d)
    np.fill_diagonal(R, -np.inf)
    i, j = np.unravel_index(np.argmax(R), R.shape)
    return (int(min(i, j)), int(max(i, j)))


def safe_cholesky(K, variance, stage="cov"):
    """Lower Cholesky factor of a covariance matrix.

    On failure, ``JITTER_COV * variance`` is added to the diagonal once
    and the factorization retried.

    Returns
    -------
    L : ndarray
        Lower triangular factor.
    jittered : bool
        Whether the diagonal was inflated.
    """
    try:
        return sla.cholesky(K, lower=True, check_finite=False), False
    except np.linalg.LinAlgError:
        pass
    Kj = K + JITTER_COV * variance * np.eye(K.shape[0])
    try:
        return sla.cholesky(Kj, lower=True, check_finite=False), True
    except np.linalg.LinAlgError:
        pair = _closest_pair(K) if K.shape[0] > 1 else (0, 0)
        raise NumericalFailure(
            stage, f"covariance singular after jitter; most collinear pair {pair}"
        ) from None
