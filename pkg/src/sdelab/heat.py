"""Heat semigroup on the lower floor and its score drift.

``Q_{1-t} F(w)`` averages ``F(w + y)`` over ``y ~ mu_{1-t}``. Differentiating
the Cameron-Martin shift identity at ``h = 0`` gives the likelihood-ratio
form of the H-gradient used here:

    grad log Q_{1-t} F(w)[k] = E[F(w + y) y[k]] / ((1 - t) dt E[F(w + y)])

No derivative of ``F`` is ever taken, so ``F`` may be discontinuous. The
drift consumed by the transport maps is ``vdot = -grad log Q_{1-t} e^{-f}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .drifts import DriftModel
from .errors import ConditioningError, DomainError, GuardError, ShapeError
from .grid import LowerPath, RngStream, TimeGrid, as_batch

__all__ = [
    "PathFunctional",
    "exp_neg_f",
    "ScoreEstimate",
    "q_estimate",
    "score",
    "finite_difference_score",
    "score_batch",
    "ScoreField",
    "MartingaleReport",
    "martingale_diagnostics",
]

# Upper bound on the number of path coordinates materialized per chunk.
_CHUNK_ELEMS = 2_000_000


@dataclass(frozen=True)
class PathFunctional:
    """A functional of lower paths, evaluated on increment stacks ``(..., m, d)``.

    Positive functionals should provide ``log_fn`` so that ratios are formed
    in log space.
    """

    fn: Callable[[np.ndarray], np.ndarray] | None = None
    log_fn: Callable[[np.ndarray], np.ndarray] | None = None
    tag: tuple = ("custom",)
    positive: bool = False

    def __post_init__(self):
        if self.fn is None and self.log_fn is None:
            raise ValueError("PathFunctional needs fn or log_fn")
        if self.log_fn is not None:
            object.__setattr__(self, "positive", True)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if self.fn is not None:
            return np.asarray(self.fn(x), dtype=float)
        return np.exp(self.log_evaluate(x))

    def log_evaluate(self, x: np.ndarray) -> np.ndarray:
        if self.log_fn is not None:
            return np.asarray(self.log_fn(x), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(self.evaluate(x))

    def __call__(self, w: LowerPath) -> float:
        return float(self.evaluate(w.increments))


def exp_neg_f(model: DriftModel, grid: TimeGrid) -> PathFunctional:
    """The Girsanov density ``e^{-f}`` of ``model`` as a path functional."""
    return PathFunctional(log_fn=lambda x: -model.f(x, grid), tag=("exp_neg_f", model))


@dataclass(frozen=True)
class ScoreEstimate:
    """Estimate of ``Q_{1-t}F(w)`` and of the H-density of its log-gradient.

    Arrays carry a leading batch axis when produced by ``score_batch``.
    """

    value: np.ndarray
    log_value: np.ndarray
    density: np.ndarray
    value_stderr: np.ndarray
    score_stderr: np.ndarray
    n_inner: int
    t: float

    @property
    def drift(self) -> np.ndarray:
        """``vdot = -score``."""
        return -self.density


def _chunks(total: int, per_item: int):
    step = max(1, _CHUNK_ELEMS // max(per_item, 1))
    for start in range(0, total, step):
        yield slice(start, min(total, start + step))


def _antithetic_terms(F: PathFunctional, W: np.ndarray, y: np.ndarray):
    """Log-values of ``F(w + y)`` and ``F(w - y)``, shape ``(S, P)`` each."""
    S, P = W.shape[0], y.shape[0]
    lp = np.empty((S, P))
    lm = np.empty((S, P))
    for sl in _chunks(S, P * y.shape[1] * y.shape[2]):
        lp[sl] = F.log_evaluate(W[sl, None] + y[None])
        lm[sl] = F.log_evaluate(W[sl, None] - y[None])
    return lp, lm


def _check_t(t: float, grid: TimeGrid, guard: float | None) -> float:
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise DomainError(f"score time must lie in [0, 1), got {t}")
    guard = grid.ds if guard is None else float(guard)
    if t > 1.0 - guard + 1e-12:
        raise GuardError(f"t={t} is inside the guard band of width {guard} below 1")
    return t


def _score_arrays(F: PathFunctional, t: float, W: np.ndarray, grid: TimeGrid, n_inner: int, rng: RngStream):
    """Self-normalized likelihood-ratio estimator on a batch ``W`` of shape (S, m, d)."""
    if n_inner < 2:
        raise DomainError("score needs at least one antithetic pair (N >= 2)")
    P = n_inner // 2
    scale = np.sqrt((1.0 - t) * grid.dt)
    z = rng.normal((P,) + grid.path_shape)
    y = scale * z
    lp, lm = _antithetic_terms(F, W, y)
    top = np.maximum(lp.max(axis=1), lm.max(axis=1))
    if not np.all(np.isfinite(top)):
        bad = int(np.argmax(~np.isfinite(top)))
        raise ConditioningError(
            "every inner draw has zero or undefined weight",
            {"t": t, "batch_index": bad, "max_log_weight": float(top[bad]), "n_inner": n_inner},
        )
    wp = np.exp(lp - top[:, None])
    wm = np.exp(lm - top[:, None])
    b = wp + wm
    a_coef = (wp - wm) / scale
    den = b.sum(axis=1)
    num = np.einsum("sp,pkj->skj", a_coef, z)
    g = num / den[:, None, None]
    # Delta-method variance of the ratio estimator, one term per pair.
    resid_sq = (
        np.einsum("sp,pkj->skj", a_coef**2, z**2)
        - 2.0 * g * np.einsum("sp,pkj->skj", a_coef * b, z)
        + g**2 * np.sum(b**2, axis=1)[:, None, None]
    )
    g_se = np.sqrt(np.maximum(resid_sq, 0.0)) / den[:, None, None]
    pair_mean = 0.5 * b
    mean = pair_mean.mean(axis=1)
    rel_se = pair_mean.std(axis=1, ddof=1) / np.sqrt(P) / mean if P > 1 else np.zeros_like(mean)
    log_value = top + np.log(mean)
    value = np.exp(log_value)
    return value, log_value, g, value * rel_se, g_se


def _q_arrays(F: PathFunctional, t: float, W: np.ndarray, grid: TimeGrid, n_inner: int, rng: RngStream):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if t == 1.0:
        return F.evaluate(W), np.zeros(W.shape[0])
    if F.positive:
        value, _, _, se, _ = _score_arrays(F, t, W, grid, max(n_inner, 2), rng)
        return value, se
    P = max(n_inner // 2, 1)
    y = np.sqrt((1.0 - t) * grid.dt) * rng.normal((P,) + grid.path_shape)
    pairs = 0.5 * (F.evaluate(W[:, None] + y[None]) + F.evaluate(W[:, None] - y[None]))
    se = pairs.std(axis=1, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(W.shape[0])
    return pairs.mean(axis=1), se


def q_estimate(F: PathFunctional, t: float, w: LowerPath, n_inner: int, rng: RngStream) -> tuple[float, float]:
    """Monte Carlo ``Q_{1-t}F(w)`` with antithetic pairs; exact at ``t = 1``."""
    value, se = _q_arrays(F, t, w.increments[None], w.grid, n_inner, rng)
    return float(value[0]), float(se[0])


def finite_difference_score(
    F: PathFunctional, t: float, w: LowerPath, n_inner: int, rng: RngStream, h: float = 1e-3
) -> np.ndarray:
    """Central differences of ``log q_estimate`` in each increment, one shared inner pool.

    Moving increment ``k`` by ``h`` is the Cameron-Martin shift with density
    ``e_k / dt``, so the quotient estimates the score density at ``k``.
    """
    g = w.grid
    eye = np.eye(g.m * g.d).reshape((-1,) + g.path_shape) * h
    W = np.concatenate([w.increments[None] + eye, w.increments[None] - eye])
    value, _ = _q_arrays(F, t, W, g, n_inner, rng)
    logv = np.log(value)
    K = eye.shape[0]
    return ((logv[:K] - logv[K:]) / (2.0 * h)).reshape(g.path_shape)


def score(
    F: PathFunctional,
    t: float,
    w: LowerPath,
    n_inner: int,
    rng: RngStream,
    guard: float | None = None,
) -> ScoreEstimate:
    """H-density of ``grad log Q_{1-t}F`` at ``w`` (common draws for all components)."""
    t = _check_t(t, w.grid, guard)
    value, log_value, g, v_se, g_se = _score_arrays(F, t, w.increments[None], w.grid, n_inner, rng)
    return ScoreEstimate(value[0], log_value[0], g[0], v_se[0], g_se[0], n_inner, t)


def score_batch(
    F: PathFunctional,
    t: float,
    W: np.ndarray,
    grid: TimeGrid,
    n_inner: int,
    rng: RngStream,
    guard: float | None = None,
) -> ScoreEstimate:
    """Scores at every path of ``W`` (shape ``(S, m, d)``) from one shared inner pool."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 3 or W.shape[1:] != grid.path_shape:
        raise ShapeError(f"batch shape {W.shape} incompatible with {grid.path_shape}")
    t = _check_t(t, grid, guard)
    return ScoreEstimate(*_score_arrays(F, t, W, grid, n_inner, rng), n_inner, t)


class ScoreField:
    """The drift ``vdot_{s_i}(w)`` on the upper grid.

    Step ``i`` always draws its inner pool from ``rng.child(i)``, so repeated
    requests at the same step reuse identical draws. Models tagged
    ``constant(c)`` short-circuit to the exact ``vdot = c`` unless
    ``closed_form=False``.
    """

    def __init__(
        self,
        functional: PathFunctional,
        grid: TimeGrid,
        n_inner: int,
        rng: RngStream,
        constant: np.ndarray | None = None,
        guard: float | None = None,
    ):
        self.functional = functional
        self.grid = grid
        self.n_inner = int(n_inner)
        self.rng = rng
        self.constant = None if constant is None else np.asarray(constant, dtype=float)
        self.guard = guard

    @classmethod
    def for_model(cls, model: DriftModel, grid: TimeGrid, n_inner: int, rng: RngStream, closed_form: bool = True, guard=None):
        constant = None
        if closed_form and model.closed_form[0] == "constant":
            constant = np.asarray(model.closed_form[1], dtype=float)
        return cls(exp_neg_f(model, grid), grid, n_inner, rng, constant, guard)

    def velocity(self, i: int, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``vdot`` at upper step ``i`` for each path in ``W``, with stderrs."""
        t = i / self.grid.n
        if self.constant is not None:
            _check_t(t, self.grid, self.guard)
            v = np.broadcast_to(self.constant, W.shape).copy()
            return v, np.zeros_like(v)
        est = score_batch(self.functional, t, W, self.grid, self.n_inner, self.rng.child(i), self.guard)
        return est.drift, est.score_stderr

    def estimate(self, i: int, W: np.ndarray) -> ScoreEstimate:
        t = i / self.grid.n
        return score_batch(self.functional, t, W, self.grid, self.n_inner, self.rng.child(i), self.guard)


@dataclass
class MartingaleReport:
    """Per-sheet diagnostics of ``M_i = Q_{1-s_i}(e^{-f})(B[i])``.

    ``residual[:, i]`` is ``log M_i + sum_{j<i} <vdot_j, dB[j+1]> +
    1/2 sum_{j<i} |vdot_j|_H^2 ds``.
    """

    grid: TimeGrid
    M: np.ndarray
    M_stderr: np.ndarray
    residual: np.ndarray
    residual_sigma: np.ndarray
    rho: np.ndarray
    n_inner: int
    scenario: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def terminal_index(self) -> int:
        return self.M.shape[1] - 1

    @property
    def drift_proxy(self) -> np.ndarray:
        """``|mean_sheets(M_i) - mean_sheets(rho)|`` for every i."""
        return np.abs(self.M.mean(axis=0) - self.rho.mean())

    @property
    def positive(self) -> np.ndarray:
        return self.M.min(axis=1) > 0.0

    @property
    def mean_abs_residual(self) -> float:
        return float(np.mean(np.abs(self.residual[:, -1])))

    def records(self) -> list[dict]:
        out = []
        S, I = self.M.shape
        for sid in range(S):
            for i in range(I):
                out.append(
                    {
                        "scenario": self.scenario,
                        "sheet": sid,
                        "i": i,
                        "s": i / self.grid.n,
                        "M": float(self.M[sid, i]),
                        "R": float(self.residual[sid, i]),
                        "M_stderr": float(self.M_stderr[sid, i]),
                        "R_sigma": float(self.residual_sigma[sid, i]),
                    }
                )
        return out


def martingale_diagnostics(
    model: DriftModel,
    sheets,
    n_inner: int,
    rng: RngStream,
    closed_form: bool = False,
    scenario: str = "",
) -> MartingaleReport:
    """Track ``M_i`` and the exponential residual along each sheet up to ``i = n - 1``.

    Scores are needed at ``s_0 .. s_{n-2}``, which stays outside the default
    guard band.
    """
    batch, _ = as_batch(sheets)
    grid = batch.grid
    n, dt, ds = grid.n, grid.dt, grid.ds
    B = batch.slices()
    S = len(batch)
    F = exp_neg_f(model, grid)
    field_ = ScoreField.for_model(model, grid, n_inner, rng, closed_form=closed_form)
    M = np.empty((S, n))
    M_se = np.empty((S, n))
    logM = np.empty((S, n))
    pair_sum = np.zeros(S)
    quad_sum = np.zeros(S)
    var_sum = np.zeros(S)
    R = np.empty((S, n))
    R_sig = np.empty((S, n))
    for i in range(n):
        t = i / n
        try:
            if i < n - 1:
                if field_.constant is not None:
                    c = field_.constant
                    x = B[:, i]
                    logv = -np.sum(c * x, axis=(1, 2)) - 0.5 * float(c @ c) * t
                    value, v_se = np.exp(logv), np.zeros(S)
                    v, v_sig = np.broadcast_to(c, x.shape), np.zeros(x.shape)
                else:
                    est = field_.estimate(i, B[:, i])
                    value, logv, v_se = est.value, est.log_value, est.value_stderr
                    v, v_sig = est.drift, est.score_stderr
            else:
                value, v_se = _q_arrays(F, t, B[:, i], grid, n_inner, rng.child(i))
                with np.errstate(divide="ignore"):
                    logv = np.log(value)
        except ConditioningError as exc:
            exc.diagnostics.update({"i": i, "s": t})
            raise
        M[:, i], M_se[:, i], logM[:, i] = value, v_se, logv
        R[:, i] = logv + pair_sum + quad_sum
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(value > 0, v_se / value, 0.0)
        R_sig[:, i] = np.sqrt(var_sum + rel**2)
        if i < n - 1:
            dB = batch.increments[:, i]
            pair_sum += np.sum(v * dB, axis=(1, 2))
            quad_sum += 0.5 * ds * dt * np.sum(v * v, axis=(1, 2))
            var_sum += np.sum((v_sig * dB) ** 2, axis=(1, 2)) + np.sum((ds * dt * v * v_sig) ** 2, axis=(1, 2))
    rho = np.exp(-model.f(batch.terminal(), grid))
    return MartingaleReport(grid, M, M_se, R, R_sig, rho, n_inner, scenario)
