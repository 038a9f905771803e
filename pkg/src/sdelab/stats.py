"""Small statistical helpers: paired z-scores and weighted two-sample KS."""

from __future__ import annotations

import numpy as np
from scipy.special import kolmogi

__all__ = ["paired_z", "mean_stderr", "effective_sample_size", "weighted_ks", "ks_critical", "gaussian_cf_z"]


def mean_stderr(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def paired_z(a, b) -> float:
    """z-score of ``mean(a - b)`` using the paired standard error.

    Identical samples give ``0``.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    mean, se = mean_stderr(d)
    if se == 0.0:
        return 0.0 if mean == 0.0 else float(np.sign(mean) * np.inf)
    return mean / se


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w**2))


def ks_critical(n1: float, n2: float, alpha: float = 0.01) -> float:
    """Asymptotic two-sample critical value ``c(alpha) sqrt((n1 + n2) / (n1 n2))``."""
    return float(kolmogi(alpha) * np.sqrt((n1 + n2) / (n1 * n2)))


def _weighted_cdf(sample, weights, at):
    order = np.argsort(sample, kind="stable")
    xs = sample[order]
    cw = np.concatenate([[0.0], np.cumsum(weights[order])])
    cw /= cw[-1]
    return cw[np.searchsorted(xs, at, side="right")]


def weighted_ks(a, b, weights_a=None, weights_b=None, alpha: float = 0.01) -> dict:
    """Two-sample KS statistic between weighted empirical laws.

    Sample sizes entering the critical value are Kish effective sizes.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    wa = np.ones_like(a) if weights_a is None else np.asarray(weights_a, dtype=float).ravel()
    wb = np.ones_like(b) if weights_b is None else np.asarray(weights_b, dtype=float).ravel()
    grid = np.concatenate([a, b])
    stat = float(np.max(np.abs(_weighted_cdf(a, wa, grid) - _weighted_cdf(b, wb, grid))))
    na, nb = effective_sample_size(wa), effective_sample_size(wb)
    crit = ks_critical(na, nb, alpha)
    return {"statistic": stat, "critical": crit, "n_eff_a": na, "n_eff_b": nb, "passed": stat < crit}


def gaussian_cf_z(samples, mean: float, var: float, freqs=(0.5, 1.0, 2.0)) -> list[dict]:
    """z-scores of the empirical characteristic function against ``N(mean, var)``.

    Real and imaginary parts are compared separately at each frequency.
    """
    x = np.asarray(samples, dtype=float).ravel()
    rows = []
    for u in freqs:
        damp = np.exp(-0.5 * var * u * u)
        for part, vals, exact in (
            ("cos", np.cos(u * x), damp * np.cos(u * mean)),
            ("sin", np.sin(u * x), damp * np.sin(u * mean)),
        ):
            mu, se = mean_stderr(vals)
            z = (mu - exact) / se if se > 0 else (0.0 if mu == exact else float("inf"))
            rows.append({"u": float(u), "part": part, "empirical": mu, "exact": float(exact), "stderr": se, "z": float(z)})
    return rows
