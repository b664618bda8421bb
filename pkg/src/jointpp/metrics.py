"""Scoring rules and model-choice summaries for predictive draws."""

import numpy as np
from scipy.stats import norm


def rmspe(predicted, observed):
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    return float(np.sqrt(np.mean((predicted - observed) ** 2)))


def crps_per_target(draws, observed):
    """Sample CRPS for each target: ``E|X - y| - E|X - X'| / 2``.

    ``draws`` is ``(m, k)`` with one column per target. The pairwise term is
    averaged over distinct pairs using the sorted-sample identity, which
    costs ``O(m log m)`` per target.
    """
    X = np.asarray(draws, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.broadcast_to(np.asarray(observed, dtype=float), (X.shape[1],))
    m = X.shape[0]
    first = np.mean(np.abs(X - y), axis=0)
    if m < 2:
        return first
    Xs = np.sort(X, axis=0)
    w = 2.0 * np.arange(1, m + 1) - m - 1
    pair = 2.0 * (w @ Xs) / (m * (m - 1))
    return first - 0.5 * pair


def crps(draws, observed):
    """Sample CRPS summed over targets; smaller is better."""
    return float(np.sum(crps_per_target(draws, observed)))


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``y``."""
    z = (np.asarray(y) - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi))


def grs(mean, var, observed):
    """Gaussian density score with diagonal covariance; larger is better.

    ``-sum(log var) - sum((y - mean)^2 / var)``.
    """
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("predictive variances must be positive for the density score")
    r = np.asarray(observed, dtype=float) - np.asarray(mean, dtype=float)
    return float(-np.sum(np.log(var)) - np.sum(r**2 / var))


def coverage_and_width(draws, observed, level=0.95):
    """Percent of targets inside their central ``level`` interval and the
    mean interval width."""
    X = np.asarray(draws, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    lo_q = 0.5 * (1.0 - level)
    lo, hi = np.quantile(X, [lo_q, 1.0 - lo_q], axis=0)
    y = np.broadcast_to(np.asarray(observed, dtype=float), lo.shape)
    inside = (y >= lo) & (y <= hi)
    return 100.0 * float(np.mean(inside)), float(np.mean(hi - lo))


def gelfand_ghosh(replicates, observed):
    """Posterior predictive loss ``(G, P, D = G + P)``.

    ``replicates`` is ``(draws, N)``.
    """
    R = np.asarray(replicates, dtype=float)
    obs = np.asarray(observed, dtype=float)
    G = float(np.sum((obs - R.mean(axis=0)) ** 2))
    P = float(np.sum(R.var(axis=0))) if R.shape[0] > 1 else 0.0
    return G, P, G + P


def prediction_scores(draws, observed, level=0.95, prefix=""):
    """RMSPE, CRPS, GRS, coverage and width for one set of predictive draws."""
    X = np.asarray(draws, dtype=float)
    med = np.median(X, axis=0)
    var = X.var(axis=0, ddof=1)
    cov, width = coverage_and_width(X, observed, level)
    return {
        f"{prefix}rmspe": rmspe(med, observed),
        f"{prefix}crps": crps(X, observed),
        f"{prefix}grs": grs(X.mean(axis=0), var, observed),
        f"{prefix}coverage_pct": cov,
        f"{prefix}width": width,
    }


def format_report(metrics):
    """Flat ``key = value`` text, one metric per line, in insertion order."""
    lines = []
    for k, v in metrics.items():
        lines.append(f"{k} = {v:.10g}" if isinstance(v, (float, np.floating)) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            v = v.strip()
            try:
                out[k.strip()] = float(v)
            except ValueError:
                out[k.strip()] = v
    return out
