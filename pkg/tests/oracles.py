"""Independent reference values used by the tests.

Nothing here imports the estimators under test; these are closed forms and
deterministic quadratures.
"""

from __future__ import annotations

import numpy as np


def gauss_hermite_expectation(fn, mean: float = 0.0, var: float = 1.0, nodes: int = 20) -> float:
    """``E[fn(X)]`` for ``X ~ N(mean, var)`` by probabilists' Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * fn(mean + np.sqrt(var) * x)) / np.sqrt(2.0 * np.pi))


def constant_drift_log_q(c: float, W1: float, t: float) -> float:
    """``log Q_{1-t} e^{-f}`` at a path with terminal value ``W1`` for ``b = c``."""
    return -c * W1 - 0.5 * c * c * t


def constant_drift_f_n(c: float, W1: float, n: int) -> float:
    """``-log e^{-f_n}`` for ``b = c`` with the constant direction in the basis."""
    a = np.exp(-1.0 / n)
    return a * c * W1 + 0.5 * a * a * c * c


def constant_drift_rho_moment(c: float, eps: float) -> float:
    """``E[rho^{1+eps}]`` for ``b = c`` in one dimension."""
    return float(np.exp(eps * (1.0 + eps) * c * c / 2.0))


def linear_drift_score(theta: float, w_increments: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Exact score density of ``log Q_{1-t} e^{-f}`` for ``b(y) = theta y``, ``d = 1``, ``x0 = 0``.

    ``f`` is a quadratic form in the increments, ``f(x) = x^T M x`` with ``M``
    built from the strictly lower-triangular prefix-sum operator, so the
    Gaussian convolution is available in closed form.
    """
    x = np.asarray(w_increments, dtype=float).ravel()
    m = x.size
    L = np.tril(np.ones((m, m)), -1)  # X_{k-1} = sum_{j<k} x_j
    # f(x) = theta x^T L^T x ... written symmetrically plus 1/2 theta^2 |Lx|^2 dt
    S = theta * 0.5 * (L + L.T) + 0.5 * theta * theta * dt * L.T @ L
    s2 = (1.0 - t) * dt
    # E exp(-(x+y)^T S (x+y)), y ~ N(0, s2 I): gradient of its log in x
    P = np.eye(m) + 2.0 * s2 * S
    grad_log = -2.0 * np.linalg.solve(P, S @ x)
    return grad_log


def det2_from_eigenvalues(A: np.ndarray) -> float:
    """``prod (1 + l_i) exp(-l_i)`` over the eigenvalues of ``A``."""
    lam = np.linalg.eigvals(A)
    return float(np.real(np.prod((1.0 + lam) * np.exp(-lam))))


def gaussian_quadratic_mgf(S: np.ndarray) -> float:
    """``E exp(-z^T S z)`` for standard normal ``z``: ``det(I + 2 S)^{-1/2}``."""
    return float(np.linalg.det(np.eye(S.shape[0]) + 2.0 * S) ** -0.5)
