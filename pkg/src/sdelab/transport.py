"""Adapted perturbation of identity on the upper floor and its inverse.

``V^tau`` shifts a sheet by the score drift evaluated along the sheet itself;
``U`` solves ``dU = -vdot(t, U) dt + dB`` by forward Euler. Because the drift
at step ``i`` only reads slices ``0..i``, the inverse is explicit step by
step: no fixed-point iteration is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .drifts import DriftModel
from .errors import DimensionError, GuardError, ShapeError
from .grid import RngStream, SheetBatch, TimeGrid, UpperSheet, as_batch, nodal_values, sample_sheets
from .heat import ScoreField
from .stats import paired_z, weighted_ks

__all__ = [
    "AdaptedShift",
    "TransportResult",
    "apply_V",
    "solve_U",
    "roundtrip_deviation",
    "piecing_check",
    "Det2Result",
    "det2",
    "det2_causality_check",
    "anticipating_shift",
    "TestFunctional",
    "default_test_functionals",
    "PushforwardReport",
    "pushforward_density_check",
    "terminal_law_ks",
    "terminal_limit_gap",
    "local_bounds",
]


@dataclass(frozen=True, eq=False)
class AdaptedShift:
    """Causal H2-valued shift stored as per-upper-step H-densities.

    ``density[..., i, :, :]`` is the rate applied on the upper interval
    ``(s_i, s_{i+1}]``; it may depend on slices ``0..i`` only.
    """

    grid: TimeGrid
    density: np.ndarray

    def __post_init__(self):
        u = np.array(self.density, dtype=float)
        if u.shape[-3:] != self.grid.sheet_shape:
            raise ShapeError(f"shift shape {u.shape} incompatible with {self.grid.sheet_shape}")
        u.setflags(write=False)
        object.__setattr__(self, "density", u)

    @classmethod
    def zero(cls, grid: TimeGrid, batch: int | None = None) -> "AdaptedShift":
        shape = grid.sheet_shape if batch is None else (batch,) + grid.sheet_shape
        return cls(grid, np.zeros(shape))

    def h2_norm2(self) -> np.ndarray:
        """``sum_i |udot[i]|_H^2 ds``."""
        g = self.grid
        return np.sum(self.density**2, axis=(-3, -2, -1)) * g.dt * g.ds

    def slice_density(self, i: int | None = None) -> np.ndarray:
        """H-density of the shift at upper time ``s_i`` (default: time 1)."""
        n = self.grid.n if i is None else i
        return self.density[..., :n, :, :].sum(axis=-3) * self.grid.ds

    def path_increments(self) -> np.ndarray:
        """Upper increments of the shift as a sheet: ``udot[i] * ds * dt``."""
        return self.density * (self.grid.ds * self.grid.dt)

    def __getitem__(self, j) -> "AdaptedShift":
        return AdaptedShift(self.grid, self.density[j])


@dataclass
class TransportResult:
    """Output sheet(s) of a transport together with the shift that produced them.

    ``log_weight`` is the discrete Girsanov exponent
    ``-sum <vdot_j, dX[j+1]> - 1/2 sum |vdot_j|_H^2 ds`` along the path ``X``
    at which the drift was evaluated: the input for ``V``, the output for ``U``.
    """

    output: UpperSheet | SheetBatch
    shift: AdaptedShift
    tau: float
    score_stderr_max: np.ndarray
    log_weight: np.ndarray = field(repr=False, default=None)

    @property
    def stderr_summary(self) -> dict:
        s = np.asarray(self.score_stderr_max)
        return {"max": float(s.max()) if s.size else 0.0, "mean": float(s.mean()) if s.size else 0.0}


def _drift_steps(tau: float, grid: TimeGrid, guard: float | None) -> int:
    """Number of leading upper steps carrying drift (``s_j < tau`` on the grid)."""
    guard = grid.ds if guard is None else float(guard)
    tau_max = 1.0 - guard
    if tau > tau_max + 1e-12:
        raise GuardError(f"tau={tau} exceeds tau_max={tau_max}")
    J = grid.upper_index(tau)
    if J / grid.n > tau_max + 1e-12:
        J -= 1
    return max(J, 0)


def _field(model, grid, n_inner, rng, field_, closed_form, guard):
    if field_ is not None:
        return field_
    return ScoreField.for_model(model, grid, n_inner, rng, closed_form=closed_form, guard=guard)


def _wrap(batch: SheetBatch, increments: np.ndarray, single: bool):
    out = SheetBatch(batch.grid, increments)
    return out[0] if single else out


def apply_V(
    tau: float,
    sheets,
    model: DriftModel | None,
    n_inner: int = 2000,
    rng: RngStream = RngStream(0),
    field: ScoreField | None = None,
    closed_form: bool = True,
    guard: float | None = None,
) -> TransportResult:
    """``V[i] = B[i] + sum_{j<i, s_j<tau} vdot_{s_j}(B[j]) ds`` (left-point Euler)."""
    batch, single = as_batch(sheets)
    grid = batch.grid
    J = _drift_steps(tau, grid, guard)
    vf = _field(model, grid, n_inner, rng, field, closed_form, guard)
    B = batch.slices()
    dB = batch.increments
    u = np.zeros(dB.shape)
    se = np.zeros(grid.n)
    log_w = np.zeros(len(batch))
    for j in range(J):
        v, v_se = vf.velocity(j, B[:, j])
        u[:, j] = v
        se[j] = v_se.max() if v_se.size else 0.0
        log_w -= np.sum(v * dB[:, j], axis=(1, 2)) + 0.5 * grid.ds * grid.dt * np.sum(v * v, axis=(1, 2))
    out = dB + u * (grid.ds * grid.dt)
    shift = AdaptedShift(grid, u[0] if single else u)
    return TransportResult(_wrap(batch, out, single), shift, J / grid.n, se, log_w[0] if single else log_w)


def solve_U(
    sheets,
    model: DriftModel | None,
    tau: float,
    n_inner: int = 2000,
    rng: RngStream = RngStream(0),
    field: ScoreField | None = None,
    closed_form: bool = True,
    guard: float | None = None,
    terminal_step: bool = False,
) -> TransportResult:
    """Forward Euler for ``dU = -vdot(t, U) dt + dB``, ``U[0] = 0``.

    Step ``i`` reads ``U[i]`` only, so the solution is adapted by construction.
    With ``terminal_step`` the final upper step ``[1 - ds, 1]`` is driven too,
    using the drift at its left point ``1 - ds``; ``tau`` must then be the
    last upper node before 1.
    """
    batch, single = as_batch(sheets)
    grid = batch.grid
    J = _drift_steps(tau, grid, guard)
    if terminal_step:
        if J != grid.n - 1:
            raise GuardError("terminal_step needs tau = 1 - ds")
        J = grid.n
    vf = _field(model, grid, n_inner, rng, field, closed_form, guard)
    dB = batch.increments
    S = len(batch)
    out = np.empty(dB.shape)
    u = np.zeros(dB.shape)
    se = np.zeros(grid.n)
    log_w = np.zeros(S)
    U = np.zeros((S,) + grid.path_shape)
    for i in range(grid.n):
        step = dB[:, i]
        if i < J:
            v, v_se = vf.velocity(i, U)
            u[:, i] = -v
            se[i] = v_se.max() if v_se.size else 0.0
            step = step - v * (grid.ds * grid.dt)
            log_w -= np.sum(v * step, axis=(1, 2)) + 0.5 * grid.ds * grid.dt * np.sum(v * v, axis=(1, 2))
        out[:, i] = step
        U = U + step
    shift = AdaptedShift(grid, u[0] if single else u)
    return TransportResult(_wrap(batch, out, single), shift, J / grid.n, se, log_w[0] if single else log_w)


def _max_slice_sup(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Max over slices of the lower sup-norm of ``a - b`` (sheet increment stacks)."""
    diff = np.cumsum(a - b, axis=1)
    return np.abs(nodal_values(diff)).max(axis=(1, 2, 3))


def roundtrip_deviation(
    model: DriftModel,
    sheets,
    tau: float,
    n_inner: int,
    rng: RngStream,
    closed_form: bool = True,
    independent: bool = True,
) -> dict:
    """Deviation from identity of ``U o V`` and ``V o U``, per sheet.

    With ``independent=True`` the forward and backward maps draw their inner
    pools from different streams, so the deviation measures inner noise.
    """
    batch, _ = as_batch(sheets)
    r1 = rng.child(0)
    r2 = rng.child(1) if independent else r1
    V = apply_V(tau, batch, model, n_inner, r1, closed_form=closed_form).output
    UV = solve_U(V, model, tau, n_inner, r2, closed_form=closed_form).output
    U = solve_U(batch, model, tau, n_inner, r1, closed_form=closed_form).output
    VU = apply_V(tau, U, model, n_inner, r2, closed_form=closed_form).output
    return {
        "U_of_V": _max_slice_sup(UV.increments, batch.increments),
        "V_of_U": _max_slice_sup(VU.increments, batch.increments),
    }


def piecing_check(
    model: DriftModel,
    tau: float,
    kappa: float,
    sheets,
    n_inner: int,
    rng: RngStream,
    common: bool = True,
    closed_form: bool = True,
) -> float:
    """Max deviation between ``U^tau`` and ``U^kappa`` on slices ``s_i <= kappa``."""
    batch, _ = as_batch(sheets)
    grid = batch.grid
    if not kappa < tau:
        raise ValueError("piecing needs kappa < tau")
    Ut = solve_U(batch, model, tau, n_inner, rng, closed_form=closed_form).output
    Uk = solve_U(batch, model, kappa, n_inner, rng if common else rng.child(2**31), closed_form=closed_form).output
    k = grid.upper_index(kappa)
    a = np.cumsum(Ut.increments[:, :k], axis=1)
    b = np.cumsum(Uk.increments[:, :k], axis=1)
    return float(np.abs(a - b).max()) if k > 0 else 0.0


@dataclass(frozen=True)
class Det2Result:
    det2: float
    strictly_lower: bool
    max_off_causal: float
    A: np.ndarray = field(repr=False)


def det2(A: np.ndarray) -> float:
    """Carleman-Fredholm determinant ``det(I + A) exp(-trace A)``."""
    A = np.asarray(A, dtype=float)
    sign, logdet = np.linalg.slogdet(np.eye(A.shape[0]) + A)
    return float(sign * np.exp(logdet - np.trace(A)))


def anticipating_shift(a: float, grid: TimeGrid) -> Callable[[np.ndarray], np.ndarray]:
    """A non-causal control: ``udot[0]`` at the first coordinate reads its own
    step's increment, ``a * dB[1] / (ds dt)``. Its Jacobian is ``a`` at one
    diagonal entry."""

    def shift_map(increments: np.ndarray) -> np.ndarray:
        u = np.zeros(increments.shape)
        u[:, 0, 0, 0] = a * increments[:, 0, 0, 0] / (grid.ds * grid.dt)
        return u

    return shift_map


def det2_causality_check(
    model: DriftModel | None,
    sheet: UpperSheet,
    tau: float,
    eta: float | None = None,
    n_inner: int = 2000,
    rng: RngStream = RngStream(0),
    shift_map: Callable[[np.ndarray], np.ndarray] | None = None,
    closed_form: bool = False,
    max_dim: int = 64,
) -> Det2Result:
    """Central finite-difference Jacobian of ``increments -> v^tau`` in H2 coordinates.

    In orthonormal H2 coordinates ``A = ds * dt * d(udot)/d(dB)``. The block
    of output step ``i`` against input increment ``dB[j+1]`` must vanish for
    ``j >= i``; ``eta`` defaults to ``1e-4 * sqrt(ds * dt)``. The inner pool
    is pinned so the shift is a deterministic function of the sheet.
    """
    grid = sheet.grid
    D = grid.n * grid.m * grid.d
    if D > max_dim:
        raise DimensionError(f"perturbation dimension {D} exceeds {max_dim}")
    eta = 1e-4 * np.sqrt(grid.ds * grid.dt) if eta is None else float(eta)
    if shift_map is None:

        def shift_map(increments):
            res = apply_V(tau, SheetBatch(grid, increments), model, n_inner, rng, closed_form=closed_form)
            return np.asarray(res.shift.density)

    base = sheet.increments.reshape(-1)
    probes = np.repeat(base[None], 2 * D, axis=0)
    idx = np.arange(D)
    probes[2 * idx, idx] += eta
    probes[2 * idx + 1, idx] -= eta
    out = shift_map(probes.reshape((2 * D,) + grid.sheet_shape)).reshape(2 * D, D)
    J = (out[0::2] - out[1::2]).T / (2.0 * eta)
    A = grid.ds * grid.dt * J
    block = grid.m * grid.d
    rows = np.arange(D) // block
    cols = np.arange(D) // block
    off = cols[None, :] >= rows[:, None]
    max_off = float(np.abs(A[off]).max()) if off.any() else 0.0
    return Det2Result(det2(A), max_off <= 10.0 * eta, max_off, A)


@dataclass(frozen=True)
class TestFunctional:
    """Bounded functional of a lower path given by its increments ``(S, m, d)``."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    bound: float

    __test__ = False

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x), dtype=float)


def _terminal(x):
    return x.sum(axis=-2)[..., 0]


def default_test_functionals(lam: float = 1.0) -> list[TestFunctional]:
    """Five bounded functionals of the terminal slice."""
    return [
        TestFunctional(f"cos{lam:g}", lambda x: np.cos(lam * _terminal(x)), 1.0),
        TestFunctional(f"sin{lam:g}", lambda x: np.sin(lam * _terminal(x)), 1.0),
        TestFunctional("tanh", lambda x: np.tanh(_terminal(x)), 1.0),
        TestFunctional("smooth_step", lambda x: 0.5 * (1.0 + np.tanh(2.0 * _terminal(x))), 1.0),
        TestFunctional("exp_neg_sup", lambda x: np.exp(-np.abs(nodal_values(x)).max(axis=(-2, -1))), 1.0),
    ]


@dataclass
class PushforwardReport:
    """Paired comparisons, one row per test functional.

    Side ``a``: ``E[G(U_1)]`` against ``E[G(B_1) e^{-f(B_1)}]``.
    Side ``b``: ``E[G(V_1) Z]`` against ``E[G(B_1)]`` with ``Z`` the discrete
    Girsanov weight along the sheet.
    """

    rows: list[dict]
    n_sheets: int
    tau: float
    terminal_U: np.ndarray = field(repr=False)
    terminal_B: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)

    @property
    def max_abs_z(self) -> float:
        return max(max(abs(r["z_a"]), abs(r["z_b"])) for r in self.rows)


def pushforward_density_check(
    model: DriftModel,
    grid: TimeGrid,
    n_sheets: int,
    n_inner: int,
    rng: RngStream,
    tau: float | None = None,
    functionals: Sequence[TestFunctional] | None = None,
    closed_form: bool = True,
    sheets: SheetBatch | None = None,
) -> PushforwardReport:
    """Two-sided check of ``dU(P)/dP = e^{-f(B_1)}`` with paired standard errors."""
    tau = 1.0 - grid.ds if tau is None else tau
    functionals = default_test_functionals() if functionals is None else list(functionals)
    batch = sample_sheets(grid, n_sheets, rng.child(0)) if sheets is None else sheets
    U = solve_U(batch, model, tau, n_inner, rng.child(1), closed_form=closed_form)
    V = apply_V(tau, batch, model, n_inner, rng.child(2), closed_form=closed_form)
    B1 = batch.terminal()
    U1 = U.output.terminal()
    V1 = V.output.terminal()
    rho = np.exp(-model.f(B1, grid))
    Z = np.exp(V.log_weight)
    rows = []
    for G in functionals:
        gU, gB, gV = G(U1), G(B1), G(V1)
        za = paired_z(gU, gB * rho)
        zb = paired_z(gV * Z, gB)
        rows.append(
            {
                "functional": G.name,
                "U_mean": float(gU.mean()),
                "U_stderr": float(gU.std(ddof=1) / np.sqrt(len(gU))),
                "weighted_mean": float((gB * rho).mean()),
                "weighted_stderr": float((gB * rho).std(ddof=1) / np.sqrt(len(gB))),
                "V_weighted_mean": float((gV * Z).mean()),
                "B_mean": float(gB.mean()),
                "z_a": za,
                "z_b": zb,
            }
        )
    return PushforwardReport(rows, len(batch), tau, U1, B1, rho)


def terminal_law_ks(report: PushforwardReport, alpha: float = 0.01) -> dict:
    """Weighted KS between terminal values of ``U`` and of ``B`` weighted by ``e^{-f}``."""
    return weighted_ks(_terminal(report.terminal_U), _terminal(report.terminal_B), weights_b=report.rho, alpha=alpha)


def terminal_limit_gap(model: DriftModel, sheets, n_inner: int, rng: RngStream, closed_form: bool = True) -> dict:
    """Mean sup-norm gap between terminal slices solved with ``tau = 1 - 1/n`` and ``1 - 2/n``."""
    batch, _ = as_batch(sheets)
    g = batch.grid
    a = solve_U(batch, model, 1.0 - g.ds, n_inner, rng, closed_form=closed_form).output.terminal()
    b = solve_U(batch, model, 1.0 - 2.0 * g.ds, n_inner, rng, closed_form=closed_form).output.terminal()
    gap = np.abs(nodal_values(a - b)).max(axis=(1, 2))
    scale = np.abs(nodal_values(a)).max(axis=(1, 2))
    return {"mean_gap": float(gap.mean()), "mean_sup": float(scale.mean()), "ratio": float(gap.mean() / scale.mean())}


def local_bounds(
    model: DriftModel,
    sheet: UpperSheet,
    tau: float,
    radius: float,
    n_probes: int,
    n_inner: int,
    rng: RngStream,
) -> dict:
    """Empirical ``sup |vdot_t(B_t + K_t)|_H`` over random ``K`` with ``|K|_{H2} <= radius``.

    Also reports the largest directional difference quotient of ``vdot`` in
    H as a proxy for the gradient bound. Measured, not certified.
    """
    grid = sheet.grid
    J = _drift_steps(tau, grid, None)
    vf = ScoreField.for_model(model, grid, n_inner, rng.child(0), closed_form=False)
    gen = rng.child(1).generator()
    K = gen.standard_normal((n_probes,) + grid.sheet_shape)
    norms = np.sqrt(np.sum(K**2, axis=(1, 2, 3)) * grid.ds * grid.dt)
    K *= (radius * gen.uniform(size=n_probes) ** (1.0 / K[0].size) / norms)[:, None, None, None]
    Kslices = np.cumsum(K * grid.ds * grid.dt, axis=1)
    B = sheet.slices()
    h = 1e-3
    dirs = gen.standard_normal((n_probes,) + grid.path_shape)
    dirs /= np.sqrt(np.sum(dirs**2, axis=(1, 2)) * grid.dt)[:, None, None]
    sup_v, sup_grad = 0.0, 0.0
    for i in range(J):
        W = B[i] + (Kslices[:, i - 1] if i > 0 else np.zeros((n_probes,) + grid.path_shape))
        v, _ = vf.velocity(i, W)
        v2, _ = vf.velocity(i, W + h * dirs * grid.dt)
        sup_v = max(sup_v, float(np.sqrt(np.sum(v**2, axis=(1, 2)) * grid.dt).max()))
        sup_grad = max(sup_grad, float((np.sqrt(np.sum((v2 - v) ** 2, axis=(1, 2)) * grid.dt) / h).max()))
    return {"sup_vdot_H": sup_v, "sup_dvdot_H": sup_grad, "radius": radius, "probes": n_probes}
