"""Entropy-variational functional on the upper floor.

For an adapted shift ``xi`` with per-step densities ``udot[i]``:

    K_direct(xi)  = E[ 1/2 |xi|_{H2}^2 + f(B_1 + xi_1) ]
    K_reduced(xi) = E[ sum_k |xidot_1[k] + b(t_{k-1}, x0 + xi_1(t_{k-1}) + B_1(t_{k-1}))|^2 dt ]

where ``xi_1`` is the shift's slice at upper time 1. Both vanish at the
canonical minimizer ``xi* = U - B`` built from the inverse transport.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .drifts import DriftModel
from .errors import DivergenceError, ValidationError
from .grid import RngStream, SheetBatch, as_batch, nodal_values
from .stats import mean_stderr
from .transport import AdaptedShift, TransportResult, solve_U

__all__ = [
    "FeedbackPolicy",
    "KReport",
    "K_direct",
    "K_reduced",
    "evaluate_K",
    "CanonicalMinimizer",
    "canonical_minimizer",
    "SPSAConfig",
    "minimize_K",
    "write_trace_csv",
    "ito_cross_term",
    "check_causality",
]

FAMILIES = ("constant", "feedback", "tabular")


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Finite-dimensional family of causal shifts.

    The density at upper step ``i`` and lower interval ``k`` is a function of
    the controlled state ``X_i(t_{k-1}) = x0 + B[i](t_{k-1}) + xi^{(i)}(t_{k-1})``,
    where ``xi^{(i)}`` is the shift accumulated before step ``i``. Only the
    sheet prefix and lower times before ``t_k`` are read.

    * ``constant``: ``theta`` has shape ``(d,)``.
    * ``feedback``: ``theta = (a, g)``, density ``a + g * X``.
    * ``tabular``: ``theta`` has shape ``(time_bins, state_bins)``; ``d = 1``.
    """

    family: str
    theta: np.ndarray
    d: int = 1
    x0: np.ndarray | None = None
    state_edges: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown policy family {self.family!r}", field="family")
        theta = np.array(self.theta, dtype=float)
        x0 = np.zeros(self.d) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(self.d)
        if self.family == "constant":
            theta = np.broadcast_to(theta, (self.d,)).copy()
        elif self.family == "feedback":
            theta = theta.reshape(2)
        else:
            if self.d != 1:
                raise ValidationError("tabular policies support d = 1 only", field="d")
            if theta.ndim != 2:
                raise ValidationError("tabular theta must be 2-D", field="theta")
            edges = self.state_edges
            if edges is None:
                edges = np.linspace(-1.5, 1.5, theta.shape[1] + 1)[1:-1]
            edges = np.asarray(edges, dtype=float)
            if edges.shape != (theta.shape[1] - 1,):
                raise ValidationError("need state_bins - 1 interior edges", field="state_edges")
            object.__setattr__(self, "state_edges", edges)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "x0", x0)

    @classmethod
    def constant(cls, value=0.0, d: int = 1, x0=None) -> "FeedbackPolicy":
        return cls("constant", value, d, x0)

    @classmethod
    def feedback(cls, a=0.0, g=0.0, d: int = 1, x0=None) -> "FeedbackPolicy":
        return cls("feedback", [a, g], d, x0)

    @classmethod
    def tabular(cls, time_bins: int = 4, state_bins: int = 4, x0=None, edges=None) -> "FeedbackPolicy":
        return cls("tabular", np.zeros((time_bins, state_bins)), 1, x0, edges)

    @property
    def n_params(self) -> int:
        return int(self.theta.size)

    def with_theta(self, theta) -> "FeedbackPolicy":
        return replace(self, theta=np.asarray(theta, dtype=float).reshape(self.theta.shape))

    def rate(self, t_left: np.ndarray, state: np.ndarray) -> np.ndarray:
        """Density as a function of lower time and controlled state, shape of ``state``."""
        if self.family == "constant":
            return np.broadcast_to(self.theta, state.shape)
        if self.family == "feedback":
            return self.theta[0] + self.theta[1] * state
        nt = self.theta.shape[0]
        tb = np.minimum((np.asarray(t_left).reshape(-1) * nt).astype(int), nt - 1)
        sb = np.digitize(state[..., 0], self.state_edges)
        return self.theta[np.broadcast_to(tb, sb.shape), sb][..., None]

    def shift(self, sheets) -> AdaptedShift:
        """Evaluate the policy along each sheet, step by step."""
        batch, single = as_batch(sheets)
        grid = batch.grid
        if grid.d != self.d:
            raise ValidationError("policy and grid dimensions differ", field="d")
        B = batch.slices()
        t_left = grid.left_times[:, None]
        u = np.zeros(batch.increments.shape)
        acc = np.zeros((len(batch),) + grid.path_shape)
        for i in range(grid.n):
            state = self.x0 + nodal_values(B[:, i] + acc * grid.dt)[:, :-1]
            u[:, i] = self.rate(t_left, state)
            acc = acc + u[:, i] * grid.ds
        return AdaptedShift(grid, u[0] if single else u)


def check_causality(policy, sheet, i: int, rng: RngStream, scale: float = 1.0) -> bool:
    """Perturb upper increments after step ``i`` and confirm ``udot[0..i]`` is unchanged."""
    batch, _ = as_batch(sheet)
    base = policy.shift(batch).density
    noise = rng.normal(batch.increments.shape)
    noise[:, : i + 1] = 0.0
    pert = SheetBatch(batch.grid, batch.increments + scale * noise)
    other = policy.shift(pert).density
    return bool(np.array_equal(base[:, : i + 1], other[:, : i + 1]))


@dataclass(frozen=True)
class KReport:
    """Monte Carlo summary of the variational functional.

    ``K_direct_cv`` subtracts the mean-zero martingale
    ``sum_i <udot[i], dB[i+1]>`` with a fitted coefficient; it estimates the
    same quantity with lower variance.
    """

    K_direct: float | None
    K_direct_stderr: float | None
    K_reduced: float | None
    K_reduced_stderr: float | None
    h2_term: float
    f_term: float
    count: int
    K_direct_cv: float | None = None
    K_direct_cv_stderr: float | None = None


def _samples(xi: AdaptedShift, model: DriftModel, batch: SheetBatch):
    grid = batch.grid
    u = np.asarray(xi.density)
    if u.ndim == 3:
        u = u[None]
    h2 = np.sum(u**2, axis=(1, 2, 3)) * grid.dt * grid.ds
    xi1 = u.sum(axis=1) * grid.ds
    path = batch.terminal() + xi1 * grid.dt
    fterm = model.f(path, grid)
    states = model.x0 + nodal_values(path)[:, :-1]
    b = model(grid.left_times[:, None], states)
    reduced = np.sum((xi1 + b) ** 2, axis=(1, 2)) * grid.dt
    mart = np.sum(u * batch.increments, axis=(1, 2, 3))
    return 0.5 * h2, fterm, reduced, mart


def _resolve(xi, batch) -> AdaptedShift:
    if isinstance(xi, FeedbackPolicy):
        return xi.shift(batch)
    if isinstance(xi, AdaptedShift):
        return xi
    raise TypeError("xi must be a FeedbackPolicy or an AdaptedShift")


def evaluate_K(xi, model: DriftModel, sheets) -> KReport:
    """Both functionals on the same sheets, with standard errors."""
    batch, _ = as_batch(sheets)
    shift = _resolve(xi, batch)
    half_h2, fterm, reduced, mart = _samples(shift, model, batch)
    direct = half_h2 + fterm
    kd, kd_se = mean_stderr(direct)
    kr, kr_se = mean_stderr(reduced)
    var_m = float(np.var(mart))
    beta = float(np.mean((direct - direct.mean()) * (mart - mart.mean())) / var_m) if var_m > 0 else 0.0
    kcv, kcv_se = mean_stderr(direct - beta * mart)
    return KReport(kd, kd_se, kr, kr_se, float(half_h2.mean()), float(fterm.mean()), len(batch), kcv, kcv_se)


def K_direct(xi, model: DriftModel, sheets) -> KReport:
    """``E[1/2 |xi|_{H2}^2 + f(B_1 + xi_1)]``."""
    r = evaluate_K(xi, model, sheets)
    return replace(r, K_reduced=None, K_reduced_stderr=None)


def K_reduced(xi, model: DriftModel, sheets) -> KReport:
    """``E[int |xidot_1 + b(s, x0 + xi_1 + B_1)|^2 ds]``; nonnegative samplewise."""
    r = evaluate_K(xi, model, sheets)
    return replace(r, K_direct=None, K_direct_stderr=None, K_direct_cv=None, K_direct_cv_stderr=None)


@dataclass
class CanonicalMinimizer:
    """``xi* = U - B`` together with the slice process ``X = x0 + xi*_1 + B_1``.

    ``residual[k] = dX_k + b(t_{k-1}, X_{k-1}) dt - dB_1[k]``, which equals
    ``(xidot*_1[k] + b(t_{k-1}, X_{k-1})) dt``.
    """

    shift: AdaptedShift
    transport: TransportResult = field(repr=False)
    X: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)

    @property
    def max_residual(self) -> float:
        return float(np.abs(self.residual).max())


def canonical_minimizer(
    model: DriftModel,
    sheets,
    n_inner: int,
    rng: RngStream,
    tau: float | None = None,
    closed_form: bool = True,
) -> CanonicalMinimizer:
    """Minimizer built from the inverse transport: ``udot[i] = -vdot_{s_i}(U[i])``.

    By default every upper step carries drift, so ``xi*`` spans the whole
    unit interval; passing ``tau`` truncates it to ``U^tau - B``.
    """
    batch, _ = as_batch(sheets)
    grid = batch.grid
    full = tau is None
    tau = 1.0 - grid.ds if full else tau
    res = solve_U(batch, model, tau, n_inner, rng, closed_form=closed_form, terminal_step=full)
    shift = res.shift
    xi1 = np.asarray(shift.density).sum(axis=1) * grid.ds
    BN = batch.terminal()
    X = model.x0 + nodal_values(BN + xi1 * grid.dt)
    b = model(grid.left_times[:, None], X[:, :-1])
    residual = np.diff(X, axis=1) + b * grid.dt - BN
    return CanonicalMinimizer(shift, res, X, residual)


@dataclass(frozen=True)
class SPSAConfig:
    """Gains ``a_k = a / (k + 1 + A)^alpha`` and ``c_k = c / (k + 1)^gamma``."""

    iterations: int = 500
    a: float = 0.5
    c: float = 0.1
    A: float = 50.0
    alpha: float = 0.602
    gamma: float = 0.101
    divergence_factor: float = 10.0


def minimize_K(
    model: DriftModel,
    family: FeedbackPolicy,
    config: SPSAConfig,
    sheets,
    rng: RngStream,
) -> tuple[np.ndarray, list[dict]]:
    """Two-point simultaneous-perturbation descent on ``K_direct``.

    The same sheets are reused at every iteration (common random numbers),
    so the run is deterministic given ``rng``.
    """
    batch, _ = as_batch(sheets)
    gen = rng.generator()

    def K(theta):
        half_h2, fterm, _, _ = _samples(family.with_theta(theta).shift(batch), model, batch)
        return mean_stderr(half_h2 + fterm)

    theta = family.theta.astype(float).ravel().copy()
    k0, se0 = K(theta)
    limit = config.divergence_factor * k0 if k0 > 0 else k0 + 1.0
    trace = [{"iteration": 0, "K": k0, "stderr": se0, "theta_norm": float(np.linalg.norm(theta))}]
    for k in range(config.iterations):
        ak = config.a / (k + 1 + config.A) ** config.alpha
        ck = config.c / (k + 1) ** config.gamma
        delta = gen.choice([-1.0, 1.0], size=theta.size)
        kp, _ = K(theta + ck * delta)
        km, _ = K(theta - ck * delta)
        theta = theta - ak * (kp - km) / (2.0 * ck) / delta
        kk, se = K(theta)
        trace.append({"iteration": k + 1, "K": kk, "stderr": se, "theta_norm": float(np.linalg.norm(theta))})
        if kk > limit:
            raise DivergenceError(f"K={kk} exceeded {limit} at iteration {k + 1}")
    return theta.reshape(family.theta.shape), trace


def write_trace_csv(trace: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "K", "stderr", "theta_norm"])
        writer.writeheader()
        writer.writerows(trace)
    return path


def ito_cross_term(model: DriftModel, xi, sheets) -> tuple[float, float]:
    """Mean and stderr of ``sum_k b(t_{k-1}, x0 + xi_1 + B_1) . dB_1[k]``.

    For shifts causal in both times this is a martingale sum with mean zero.
    """
    batch, _ = as_batch(sheets)
    grid = batch.grid
    shift = _resolve(xi, batch)
    u = np.asarray(shift.density)
    if u.ndim == 3:
        u = u[None]
    BN = batch.terminal()
    path = BN + u.sum(axis=1) * grid.ds * grid.dt
    states = model.x0 + nodal_values(path)[:, :-1]
    b = model(grid.left_times[:, None], states)
    return mean_stderr(np.sum(b * BN, axis=(1, 2)))
