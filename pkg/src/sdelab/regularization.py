"""Smoothing of the Girsanov density and recovery of a lower-floor drift.

The regularized density is

    e^{-f_n} = P_{1/n} E[e^{-f} | V_q]

with ``P_t`` the Ornstein-Uhlenbeck semigroup (Mehler form) and ``V_q`` the
sigma-algebra generated by ``q`` Cameron-Martin-orthonormal functionals. In
increment coordinates both operators are Gaussian, so their composition is

    e^{-f_n}(w) = E[e^{-f}(a P w + (I - (1 - s) P) Z)],   a = e^{-t}, s = sqrt(1 - a^2)

with ``P`` the orthogonal projector onto the span of the basis and
``Z ~ mu_1``. The nested estimator follows the composition literally; the
collapsed one draws a single Gaussian and is used wherever a conditional
expectation over unseen increments has to be formed on top.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .drifts import DriftModel
from .errors import ConditioningError, DomainError, ValidationError
from .grid import CMVector, LowerPath, RngStream, TimeGrid, sample_lower_paths
from .heat import PathFunctional, exp_neg_f
from .stats import mean_stderr, weighted_ks

_CHUNK_ELEMS = 2_000_000

__all__ = [
    "ConditioningBasis",
    "haar_basis",
    "ou_smooth",
    "conditional_project",
    "RegularizedFunctional",
    "build_f_n",
    "extract_lower_drift",
    "extract_lower_drift_batch",
    "simulate_extracted",
    "crossing_floors",
    "PairedScores",
    "paired_scores",
    "ConvergenceReport",
    "convergence_report",
]


@dataclass(frozen=True, eq=False)
class ConditioningBasis:
    """Orthonormal Cameron-Martin vectors ``z_1..z_q`` stored as densities ``(q, m, d)``."""

    grid: TimeGrid
    vectors: np.ndarray

    def __post_init__(self):
        z = np.array(self.vectors, dtype=float).reshape((-1,) + self.grid.path_shape)
        gram = np.einsum("akj,bkj->ab", z, z) * self.grid.dt
        if not np.allclose(gram, np.eye(z.shape[0]), rtol=0.0, atol=1e-12):
            raise ValidationError("basis is not orthonormal in H", field="basis")
        z.setflags(write=False)
        object.__setattr__(self, "vectors", z)

    @property
    def q(self) -> int:
        return self.vectors.shape[0]

    @property
    def full(self) -> bool:
        return self.q == self.grid.m * self.grid.d

    def projector(self) -> np.ndarray:
        """Orthogonal projector on flattened increments, ``(m d, m d)``."""
        U = self.vectors.reshape(self.q, self.grid.m * self.grid.d) * np.sqrt(self.grid.dt)
        return U.T @ U

    def project(self, x: np.ndarray) -> np.ndarray:
        """``P x`` for increment stacks ``(..., m, d)``; ``P w = sum_i I(z_i)(w) z_i dt``."""
        coeff = np.einsum("...kj,akj->...a", x, self.vectors)
        return np.einsum("...a,akj->...kj", coeff, self.vectors) * self.grid.dt

    def vector(self, i: int) -> CMVector:
        return CMVector(self.grid, self.vectors[i])


def _haar_functions(m: int) -> np.ndarray:
    if m & (m - 1):
        raise ValidationError(f"Haar basis needs m to be a power of two, got {m}", field="m")
    mid = (np.arange(m) + 0.5) / m
    out = [np.ones(m)]
    level = 0
    while 2**level < m:
        for l in range(2**level):
            lo = l / 2**level
            hi = (l + 1) / 2**level
            half = 0.5 * (lo + hi)
            psi = np.where((mid >= lo) & (mid < half), 1.0, 0.0) - np.where((mid >= half) & (mid < hi), 1.0, 0.0)
            out.append(2 ** (level / 2) * psi)
        level += 1
    return np.array(out)


def haar_basis(grid: TimeGrid, q: int) -> ConditioningBasis:
    """First ``q`` normalized Haar densities, coarse to fine, component-major within a level."""
    if not 0 <= q <= grid.m * grid.d:
        raise DomainError(f"q must lie in [0, m d], got {q}")
    funcs = _haar_functions(grid.m)
    vecs = np.zeros((grid.m * grid.d,) + grid.path_shape)
    r = 0
    for phi in funcs:
        for j in range(grid.d):
            vecs[r, :, j] = phi
            r += 1
    return ConditioningBasis(grid, vecs[:q])


def _pairs_mean(values: np.ndarray, axis: int = -1):
    """Mean and stderr of antithetic pair averages laid out as ``[+, -]`` halves."""
    P = values.shape[axis] // 2
    a = np.take(values, np.arange(P), axis=axis)
    b = np.take(values, np.arange(P, 2 * P), axis=axis)
    pairs = 0.5 * (a + b)
    se = pairs.std(axis=axis, ddof=1) / np.sqrt(P) if P > 1 else np.zeros(pairs.mean(axis=axis).shape)
    return pairs.mean(axis=axis), se


def _antithetic_normals(rng: RngStream, count: int, shape: tuple) -> np.ndarray:
    z = rng.normal((max(count // 2, 1),) + shape)
    return np.concatenate([z, -z])


def ou_smooth(F: PathFunctional, t: float, w: LowerPath, n_draws: int, rng: RngStream) -> tuple[float, float]:
    """Mehler form ``E[F(e^{-t} w + sqrt(1 - e^{-2t}) Z)]``, ``Z ~ mu_1``."""
    t = float(t)
    if not t >= 0.0:
        raise DomainError("smoothing time must be >= 0")
    if t == 0.0:
        return float(F.evaluate(w.increments)), 0.0
    a = np.exp(-t)
    Z = np.sqrt(w.grid.dt) * _antithetic_normals(rng, n_draws, w.grid.path_shape)
    value, se = _pairs_mean(F.evaluate(a * w.increments + np.sqrt(1.0 - a * a) * Z))
    return float(value), float(se)


def _conditional_batch(
    F: PathFunctional, basis: ConditioningBasis, W: np.ndarray, n_draws: int, rng: RngStream, per_point: bool = False
):
    """``E[F | V_q]`` at each of ``W`` (``(..., m, d)``); ``per_point`` gives every path its own draws."""
    grid = basis.grid
    if basis.full:
        v = F.evaluate(W)
        return v, np.zeros_like(v)
    lead = W.shape[:-2] if per_point else ()
    Z = np.sqrt(grid.dt) * np.moveaxis(_antithetic_normals(rng, n_draws, lead + grid.path_shape), 0, len(lead))
    Zperp = Z - basis.project(Z) if basis.q else Z
    PW = basis.project(W) if basis.q else np.zeros_like(W)
    return _pairs_mean(F.evaluate(PW[..., None, :, :] + Zperp))


def conditional_project(
    F: PathFunctional, basis: ConditioningBasis, w: LowerPath, n_draws: int, rng: RngStream
) -> tuple[float, float]:
    """Gaussian conditional expectation ``E[F | V_q](w) = E[F(P w + (I - P) Z)]``."""
    if basis.grid.path_shape != w.grid.path_shape:
        raise ValidationError("basis and path live on different grids", field="basis")
    v, se = _conditional_batch(F, basis, w.increments[None], n_draws, rng)
    return float(v[0]), float(se[0])


@dataclass(frozen=True, eq=False)
class RegularizedFunctional:
    """``e^{-f_n}`` for a drift model, smoothing time ``1/n`` and basis of size ``q``.

    Budgets: ``n_mid`` outer Mehler draws times ``n_inner`` conditioning draws
    for the nested estimator, ``n_collapsed`` draws for the collapsed one.
    """

    model: DriftModel
    grid: TimeGrid
    n: int
    basis: ConditioningBasis
    n_mid: int = 256
    n_inner: int = 64
    n_collapsed: int = 4096

    @classmethod
    def build(cls, model: DriftModel, grid: TimeGrid, n: int, **budgets) -> "RegularizedFunctional":
        if n < 1:
            raise DomainError("regularization index n must be >= 1")
        return cls(model, grid, n, haar_basis(grid, min(n, grid.m * grid.d)), **budgets)

    @property
    def t(self) -> float:
        return 1.0 / self.n

    @property
    def a(self) -> float:
        return float(np.exp(-self.t))

    @property
    def s(self) -> float:
        return float(np.sqrt(1.0 - np.exp(-2.0 * self.t)))

    def mean_map(self, x: np.ndarray) -> np.ndarray:
        """``a P x``."""
        return self.a * self.basis.project(x) if self.basis.q else np.zeros_like(x)

    def noise_map(self, z: np.ndarray) -> np.ndarray:
        """``(I - (1 - s) P) z``: covariance ``s^2 P + (I - P)`` for white ``z``."""
        if not self.basis.q:
            return z
        return z - (1.0 - self.s) * self.basis.project(z)

    def _log_f(self, x):
        return -self.model.f(x, self.grid)

    def nested(self, W: np.ndarray, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
        """Literal composition ``ou_smooth(conditional_project(e^{-f}))`` at paths ``W``."""
        W = np.atleast_3d(W) if W.ndim == 2 else W
        g = self.grid
        Zo = np.sqrt(g.dt) * _antithetic_normals(rng.child(0), self.n_mid, g.path_shape)
        pts = self.a * W[:, None] + self.s * Zo[None]
        F = exp_neg_f(self.model, g)
        # fresh inner draws per outer point keep the outer pair averages independent
        inner, _ = _conditional_batch(F, self.basis, pts, self.n_inner, rng.child(1), per_point=True)
        return _pairs_mean(inner, axis=1)

    def collapsed(
        self, W: np.ndarray, rng: RngStream, n_draws: int | None = None, shared: bool = True
    ) -> tuple[np.ndarray, np.ndarray]:
        """Single-level estimator of the same expectation, returned in log space.

        ``shared`` reuses one set of draws for every path (common random
        numbers); otherwise each path gets its own draws, which keeps the
        errors of different paths independent. Returns ``(log value,
        relative stderr)`` per path.
        """
        g = self.grid
        N = self.n_collapsed if n_draws is None else n_draws
        lead = () if shared else (W.shape[0],)
        Z = np.sqrt(g.dt) * np.moveaxis(_antithetic_normals(rng, N, lead + g.path_shape), 0, len(lead))
        noise = self.noise_map(Z)
        mean = self.mean_map(W)
        S = W.shape[0]
        P = noise.shape[len(lead)] // 2
        logval = np.empty(S)
        rel = np.zeros(S)
        step = max(1, _CHUNK_ELEMS // (2 * P * g.m * g.d))
        for lo in range(0, S, step):
            hi = min(S, lo + step)
            nz = noise[None] if shared else noise[lo:hi]
            logv = self._log_f(mean[lo:hi, None] + nz)
            top = logv.max(axis=1, keepdims=True)
            w = np.exp(logv - top)
            pairs = 0.5 * (w[:, :P] + w[:, P:])
            mu = pairs.mean(axis=1)
            if P > 1:
                rel[lo:hi] = pairs.std(axis=1, ddof=1) / np.sqrt(P) / mu
            logval[lo:hi] = top[:, 0] + np.log(mu)
        return logval, rel

    def log_functional(self, rng: RngStream, n_draws: int | None = None) -> PathFunctional:
        """``e^{-f_n}`` as a path functional backed by the collapsed estimator."""
        return PathFunctional(
            log_fn=lambda x: self.collapsed(x.reshape((-1,) + self.grid.path_shape), rng, n_draws)[0].reshape(
                x.shape[:-2]
            ),
            tag=("exp_neg_f_n", self.model, self.n),
        )


def build_f_n(
    model: DriftModel,
    n: int,
    w: LowerPath,
    rng: RngStream,
    n_mid: int = 256,
    n_inner: int = 64,
    mass_draws: int = 2000,
) -> tuple[float, dict]:
    """``f_n(w)`` from the nested estimator plus a mass check over fresh paths."""
    grid = w.grid
    reg = RegularizedFunctional.build(model, grid, n, n_mid=n_mid, n_inner=n_inner)
    value, se = reg.nested(w.increments[None], rng.child(0))
    if not value[0] > 0.0:
        logv, rel = reg.collapsed(w.increments[None], rng.child(3))
        fn, flagged = float(-logv[0]), True
    else:
        fn, flagged = float(-np.log(value[0])), False
    fresh = sample_lower_paths(grid, 1.0, mass_draws, rng.child(1))
    logm, _ = reg.collapsed(fresh, rng.child(2), n_draws=2, shared=False)
    mass, mass_se = mean_stderr(np.exp(logm))
    diagnostics = {
        "exp_neg_f_n": float(value[0]),
        "stderr": float(se[0]),
        "q": reg.basis.q,
        "smoothing_time": reg.t,
        "mass": mass,
        "mass_stderr": mass_se,
        "log_space_fallback": flagged,
    }
    return fn, diagnostics


def extract_lower_drift_batch(
    reg: RegularizedFunctional,
    prefixes: np.ndarray,
    n_draws: int,
    rng: RngStream,
    shared: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete drift ``lambda_k`` for a batch of prefixes ``(S, k-1, d)``.

    ``lambda_k = -(1/dt) E[x_k e^{-f_n} | prefix] / E[e^{-f_n} | prefix]``,
    with the unseen increments and the smoothing noise drawn jointly. With
    ``shared`` the draws are common to the batch; otherwise every chunk of
    prefixes gets fresh draws per prefix. Returns ``(lambda, stderr)``,
    each ``(S, d)``.
    """
    g = reg.grid
    prefixes = np.asarray(prefixes, dtype=float)
    S, k1 = prefixes.shape[0], prefixes.shape[1]
    if k1 >= g.m:
        raise DomainError("prefix must be shorter than the grid")
    rest = g.m - k1
    N = 2 * max(n_draws // 2, 1)

    def draws(key, lead):
        x = _antithetic_normals(rng.child(0, *key), n_draws, lead + (rest, g.d))
        z = _antithetic_normals(rng.child(1, *key), n_draws, lead + g.path_shape)
        return np.sqrt(g.dt) * np.moveaxis(x, 0, len(lead)), reg.noise_map(np.sqrt(g.dt) * np.moveaxis(z, 0, len(lead)))

    if shared:
        gen_x, noise = draws((), ())
    lam = np.empty((S, g.d))
    se = np.empty((S, g.d))
    step = max(1, _CHUNK_ELEMS // (N * g.m * g.d))
    for lo in range(0, S, step):
        hi = min(S, lo + step)
        x = np.empty((hi - lo, N) + g.path_shape)
        if shared:
            gx, nz = gen_x[None], noise[None]
        else:
            gx, nz = draws((lo,), (hi - lo,))
        x[:, :, :k1] = prefixes[lo:hi, None]
        x[:, :, k1:] = gx
        logv = reg._log_f(reg.mean_map(x) + nz)
        top = logv.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise ConditioningError("conditional weights vanished", {"k": k1 + 1})
        w = np.exp(logv - top)
        den = w.sum(axis=1)
        xk = np.broadcast_to(gx[..., 0, :], (hi - lo, N, g.d))
        num = np.einsum("sn,snj->sj", w, xk)
        ratio = num / den[:, None]
        resid = w[:, :, None] * (xk - ratio[:, None, :])
        lam[lo:hi] = -ratio / g.dt
        se[lo:hi] = np.sqrt(np.sum(resid**2, axis=1)) / den[:, None] / g.dt
    return lam, se


def extract_lower_drift(reg: RegularizedFunctional, prefix, n_draws: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Single-prefix version of ``extract_lower_drift_batch``; ``prefix`` has shape ``(k-1, d)``."""
    prefix = np.asarray(prefix, dtype=float).reshape(-1, reg.grid.d)
    lam, se = extract_lower_drift_batch(reg, prefix[None], n_draws, rng)
    return lam[0], se[0]


def simulate_extracted(reg: RegularizedFunctional, n_paths: int, n_draws: int, rng: RngStream) -> np.ndarray:
    """Euler paths of ``dY = -lambda dt + dW`` with ``lambda`` extracted along each path."""
    g = reg.grid
    dW = sample_lower_paths(g, 1.0, n_paths, rng.child(0))
    Y = np.zeros_like(dW)
    for k in range(g.m):
        lam, _ = extract_lower_drift_batch(reg, Y[:, :k], n_draws, rng.child(1, k), shared=False)
        Y[:, k] = -lam * g.dt + dW[:, k]
    return Y


def crossing_floors(
    model: DriftModel,
    grid: TimeGrid,
    n: int,
    n_paths: int,
    n_draws: int,
    rng: RngStream,
    alpha: float = 0.01,
) -> dict:
    """Law of ``Y(1)`` from the extracted drift against the ``e^{-f_n}``-weighted law."""
    reg = RegularizedFunctional.build(model, grid, n, n_collapsed=n_draws)
    Y = simulate_extracted(reg, n_paths, n_draws, rng.child(0))
    ref = sample_lower_paths(grid, 1.0, n_paths, rng.child(1))
    logw, _ = reg.collapsed(ref, rng.child(2))
    weights = np.exp(logw - logw.max())
    out = weighted_ks(Y.sum(axis=1)[:, 0], ref.sum(axis=1)[:, 0], weights_b=weights, alpha=alpha)
    out.update({"n": n, "q": reg.basis.q, "m": grid.m})
    return out


class PairedScores(NamedTuple):
    """Drifts from ``e^{-f_n}`` and ``e^{-f}`` at the same probes, with error terms.

    ``influence_n`` holds per-pair influence values of ``vdot_n`` (sign
    flipped with it), shape ``(S, P, m, d)``.
    """

    vdot_n: np.ndarray
    vdot: np.ndarray
    vdot_n_stderr: np.ndarray
    distance: np.ndarray
    distance_stderr: np.ndarray
    influence_n: np.ndarray
    dt: float

    def vdot_n_along(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``<vdot_n, h>_H`` per probe and its stderr, for an H-density ``h``."""
        value = np.einsum("skj,kj->s", self.vdot_n, h) * self.dt
        se = np.sqrt(np.sum((np.einsum("spkj,kj->sp", self.influence_n, h) * self.dt) ** 2, axis=1))
        return value, se


def paired_scores(reg: RegularizedFunctional, t: float, W: np.ndarray, n_draws: int, rng: RngStream) -> PairedScores:
    """Scores of ``log Q_{1-t} e^{-f_n}`` and ``log Q_{1-t} e^{-f}`` from shared draws."""
    g = reg.grid
    P = n_draws // 2
    scale = np.sqrt((1.0 - t) * g.dt)
    z = rng.child(0).normal((P,) + g.path_shape)
    zz = np.sqrt(g.dt) * rng.child(1).normal((P,) + g.path_shape)
    noise = reg.noise_map(zz)
    out = []
    for regularized in (True, False):
        lp, lm = [], []
        for sgn in (1.0, -1.0):
            x = W[:, None] + sgn * scale * z[None]
            if regularized:
                x = reg.mean_map(x) + sgn * noise[None]
            (lp if sgn > 0 else lm).append(-reg.model.f(x, g))
        lp, lm = lp[0], lm[0]
        top = np.maximum(lp.max(axis=1), lm.max(axis=1))[:, None]
        wp, wm = np.exp(lp - top), np.exp(lm - top)
        b = wp + wm
        a = (wp - wm) / scale
        den = b.sum(axis=1)
        g_hat = np.einsum("sp,pkj->skj", a, z) / den[:, None, None]
        infl = (a[..., None, None] * z[None] - g_hat[:, None] * b[..., None, None]) / den[:, None, None, None]
        out.append((g_hat, infl))
    (gn, infl_n), (g0, infl_0) = out
    diff = gn - g0
    dist = np.sqrt(np.sum(diff**2, axis=(1, 2)) * g.dt)
    var_k = np.sum((infl_n - infl_0) ** 2, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = np.where(dist[:, None, None] > 0, diff * g.dt / dist[:, None, None], 0.0)
    dist_se = np.sqrt(np.sum(grad**2 * var_k, axis=(1, 2)))
    return PairedScores(-gn, -g0, np.sqrt(np.sum(infl_n**2, axis=1)), dist, dist_se, -infl_n, g.dt)


@dataclass
class ConvergenceReport:
    """Distances ``|vdot_n - vdot|_H`` at fixed probes and ``L^{1+eps}`` density gaps."""

    schedule: list[int]
    distances: np.ndarray
    distance_stderr: np.ndarray
    lp_distance: np.ndarray
    lp_stderr: np.ndarray
    probes: list[tuple[int, float]] = field(default_factory=list)

    @property
    def median_distance(self) -> np.ndarray:
        return np.median(self.distances, axis=1)

    @property
    def last_is_smallest(self) -> bool:
        med = self.median_distance
        return bool(med[-1] <= med.min())

    def records(self) -> list[dict]:
        rows = []
        for a, n in enumerate(self.schedule):
            for p in range(self.distances.shape[1]):
                rows.append(
                    {"n": n, "probe": p, "distance": float(self.distances[a, p]), "stderr": float(self.distance_stderr[a, p])}
                )
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["n", "probe", "distance", "stderr"])
            w.writeheader()
            w.writerows(self.records())
        return path


def convergence_report(
    model: DriftModel,
    schedule,
    probe_paths: np.ndarray,
    probe_times,
    grid: TimeGrid,
    n_draws: int,
    rng: RngStream,
    eps: float = 1.0,
    lp_paths: int = 1000,
) -> ConvergenceReport:
    """Compare regularized and raw score drifts along an ``n`` schedule.

    ``probe_paths`` (``(P, m, d)``) and ``probe_times`` (``(P,)``) fix the probe
    points ``(s_i, B[i])``. The same inner draws are used for every ``n``.
    """
    probe_paths = np.asarray(probe_paths, dtype=float)
    times = np.asarray(probe_times, dtype=float)
    schedule = [int(n) for n in schedule]
    dist = np.empty((len(schedule), len(times)))
    dist_se = np.empty_like(dist)
    lp = np.empty(len(schedule))
    lp_se = np.empty(len(schedule))
    fresh = sample_lower_paths(grid, 1.0, lp_paths, rng.child(7))
    f_raw = np.exp(-model.f(fresh, grid))
    for a, n in enumerate(schedule):
        reg = RegularizedFunctional.build(model, grid, n)
        for p, t in enumerate(times):
            ps = paired_scores(reg, float(t), probe_paths[p : p + 1], n_draws, rng.child(p))
            dist[a, p], dist_se[a, p] = ps.distance[0], ps.distance_stderr[0]
        logv, _ = reg.collapsed(fresh, rng.child(8), n_draws=n_draws)
        gap = np.abs(np.exp(logv) - f_raw) ** (1.0 + eps)
        mu, mu_se = mean_stderr(gap)
        lp[a] = mu ** (1.0 / (1.0 + eps))
        lp_se[a] = mu_se * lp[a] / ((1.0 + eps) * mu) if mu > 0 else 0.0
    return ConvergenceReport(schedule, dist, dist_se, lp, lp_se, list(zip(range(len(times)), times.tolist())))
