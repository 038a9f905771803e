"""Markovian drifts, their path functionals and Girsanov audits.

A drift ``b(t, y)`` induces on the lower floor the Ito functional

    f(w) = sum_k b(t_{k-1}, x0 + W(t_{k-1})) . x[k]
           + 1/2 sum_k |b(t_{k-1}, x0 + W(t_{k-1}))|^2 dt

and the Girsanov density ``rho = exp(-f)``. All Ito sums use the left
endpoint. Under ``rho * mu`` the path ``x0 + W`` solves
``dX = -b(t, X) dt + dbeta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, DriftEvaluationError, ValidationError
from .grid import CMVector, LowerPath, RngStream, TimeGrid, nodal_values, sample_lower_paths

__all__ = [
    "DriftModel",
    "GirsanovStats",
    "ItoF",
    "zero_drift",
    "constant_drift",
    "linear_drift",
    "sign_drift",
    "window_drift",
    "make_drift",
    "catalog",
    "CATALOG_KINDS",
    "tilde_b",
    "ito_f",
    "stochastic_integral",
    "audit_hypotheses",
    "RunningMoments",
]

_LOG_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True, eq=False)
class DriftModel:
    """Measurable drift ``b(t, y)`` plus metadata.

    ``func`` must accept a time array broadcastable against ``y[..., 0]`` and
    a state array ``y`` of shape ``(..., d)`` and return an array of the same
    shape as ``y``. It must be pure.
    """

    name: str
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d: int = 1
    x0: np.ndarray = None
    bounded: bool = False
    bound: float | None = None
    closed_form: tuple = ("none",)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.zeros(self.d) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.d,):
            raise ValidationError(f"x0 must have length {self.d}", field="x0")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.bounded and self.bound is None:
            raise ValidationError("bounded drift needs a bound", field="bound")

    @classmethod
    def from_callable(cls, func, d=1, x0=None, name="custom", bounded=False, bound=None) -> "DriftModel":
        """Plugin contract: wrap any pure vectorized ``b(t, y)``."""
        return cls(name=name, func=func, d=d, x0=x0, bounded=bounded, bound=bound)

    def __call__(self, t, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(self.func(np.asarray(t, dtype=float), y), dtype=float), y.shape)

    def on_grid(self, increments: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """``b(t_{k-1}, x0 + W(t_{k-1}))`` for a stack of increment arrays."""
        x = np.asarray(increments, dtype=float)
        states = nodal_values(x)[..., :-1, :] + self.x0
        t = grid.left_times[:, None]
        values = self(t, states)
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            k = int(bad[-2])
            raise DriftEvaluationError(
                f"drift {self.name} is not finite at t={grid.left_times[k]}",
                t=float(grid.left_times[k]),
                y=states[tuple(bad[:-1])].copy(),
            )
        return values

    def f(self, increments: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Ito functional ``f`` for increments of shape ``(..., m, d)``."""
        x = np.asarray(increments, dtype=float)
        b = self.on_grid(x, grid)
        return np.sum(b * x, axis=(-2, -1)) + 0.5 * grid.dt * np.sum(b * b, axis=(-2, -1))

    @property
    def kind(self) -> str:
        return self.params.get("kind", self.name)


def _constant_func(c):
    def b(t, y):
        return np.broadcast_to(c, y.shape)

    return b


def zero_drift(d: int = 1, x0=None) -> DriftModel:
    return DriftModel(
        "zero", _constant_func(np.zeros(d)), d, x0, True, 0.0, ("constant", np.zeros(d)), {"kind": "zero"}
    )


def constant_drift(c=1.0, d: int = 1, x0=None) -> DriftModel:
    cv = np.broadcast_to(np.asarray(c, dtype=float), (d,)).copy()
    return DriftModel(
        "constant",
        _constant_func(cv),
        d,
        x0,
        True,
        float(np.linalg.norm(cv)),
        ("constant", cv),
        {"kind": "constant", "c": cv.tolist()},
    )


def linear_drift(theta=0.5, d: int = 1, x0=None) -> DriftModel:
    theta = float(theta)

    def b(t, y):
        return theta * y

    return DriftModel("linear", b, d, x0, False, None, ("linear", theta), {"kind": "linear", "theta": theta})


def sign_drift(c=1.0, d: int = 1, x0=None) -> DriftModel:
    """``b(t, y) = c * sign(y)`` componentwise (``sign(0) = 0``)."""
    c = float(c)

    def b(t, y):
        return c * np.sign(y)

    return DriftModel("sign", b, d, x0, True, abs(c) * np.sqrt(d), ("none",), {"kind": "sign", "c": c})


def window_drift(c=1.0, a1=-0.5, a2=0.5, d: int = 1, x0=None) -> DriftModel:
    """``b(t, y) = c * 1[a1 <= y_1 <= a2]`` in every component."""
    c, a1, a2 = float(c), float(a1), float(a2)
    if a2 < a1:
        raise ValidationError("window needs a1 <= a2", field="a2")

    def b(t, y):
        inside = (y[..., :1] >= a1) & (y[..., :1] <= a2)
        return np.broadcast_to(c * inside, y.shape)

    return DriftModel(
        "window", b, d, x0, True, abs(c) * np.sqrt(d), ("none",), {"kind": "window", "c": c, "a1": a1, "a2": a2}
    )


_FACTORIES = {
    "zero": zero_drift,
    "constant": constant_drift,
    "linear": linear_drift,
    "sign": sign_drift,
    "window": window_drift,
}
CATALOG_KINDS = tuple(_FACTORIES)


def make_drift(kind: str, d: int = 1, x0=None, **params) -> DriftModel:
    """Build a catalog drift from its name and parameters."""
    try:
        factory = _FACTORIES[kind]
    except KeyError:
        raise ValidationError(f"unknown drift kind {kind!r}", field="drift") from None
    try:
        model = factory(d=d, x0=x0, **params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for drift {kind!r}: {exc}", field="drift") from None
    model.params.update({"x0": model.x0.tolist()})
    return model


def catalog(d: int = 1) -> list[DriftModel]:
    """The representative test set: zero, constant, linear, sign, window."""
    return [
        zero_drift(d),
        constant_drift(1.0, d),
        linear_drift(0.5, d),
        sign_drift(1.0, d),
        window_drift(1.0, -0.5, 0.5, d),
    ]


def _check_grid(model: DriftModel, w: LowerPath) -> None:
    if w.grid.d != model.d:
        raise DomainError(f"drift dimension {model.d} != path dimension {w.grid.d}")


def tilde_b(model: DriftModel, w: LowerPath) -> CMVector:
    """Density of ``int_0^. b(s, W_s) ds`` with left-endpoint evaluation."""
    _check_grid(model, w)
    return CMVector(w.grid, model.on_grid(w.increments, w.grid))


def stochastic_integral(integrand: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """Left-point Ito sum ``sum_k a[k] . x[k]`` over the trailing two axes."""
    return np.sum(np.asarray(integrand) * np.asarray(increments), axis=(-2, -1))


class ItoF(NamedTuple):
    f: float
    rho: float
    saturated: bool

    @property
    def log_rho(self) -> float:
        return -self.f


def ito_f(model: DriftModel, w: LowerPath) -> ItoF:
    """``f`` and ``rho = exp(-f)``; ``saturated`` flags overflow of ``rho``."""
    _check_grid(model, w)
    f = float(model.f(w.increments, w.grid))
    saturated = -f > _LOG_MAX
    rho = float(np.finfo(float).max) if saturated else float(np.exp(-f))
    return ItoF(f, rho, saturated)


class RunningMoments:
    """Streaming mean/variance with Chan's pairwise merge."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values) -> "RunningMoments":
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return self
        other = RunningMoments()
        other.count = v.size
        other.mean = float(v.mean())
        other.m2 = float(np.sum((v - other.mean) ** 2))
        return self.merge(other)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.count / n
        self.m2 = self.m2 + other.m2 + delta**2 * self.count * other.count / n
        self.count = n
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def stderr(self) -> float:
        return float(np.sqrt(self.variance / self.count)) if self.count else 0.0


@dataclass(frozen=True)
class GirsanovStats:
    mean_rho: float
    stderr_rho: float
    mean_rho_pow: float
    stderr_rho_pow: float
    eps: float
    count: int
    h1_consistent: bool
    h2_stable: bool
    h2_fluctuation: float

    @property
    def z_rho(self) -> float:
        if self.stderr_rho == 0.0:
            return 0.0 if self.mean_rho == 1.0 else float("inf")
        return (self.mean_rho - 1.0) / self.stderr_rho


def audit_hypotheses(
    model: DriftModel,
    eps: float,
    count: int,
    rng: RngStream,
    grid: TimeGrid,
    shard: int = 10_000,
) -> GirsanovStats:
    """Monte Carlo check of ``E[rho] = 1`` and finiteness of ``E[rho^(1+eps)]``.

    Work is split into shards drawn from independent child streams and merged
    with streaming moments. H2 is declared stable when the partial means of
    ``rho^(1+eps)`` over the second half of the sample vary by less than 10%.
    """
    if count < 100:
        raise DomainError("audit needs at least 100 samples")
    if not eps > 0:
        raise DomainError("eps must be positive")
    if grid.d != model.d:
        raise DomainError("grid and drift dimensions differ")
    rho_m, pow_m = RunningMoments(), RunningMoments()
    pow_values = []
    for j, start in enumerate(range(0, count, shard)):
        size = min(shard, count - start)
        x = sample_lower_paths(grid, 1.0, size, rng.child(j))
        f = model.f(x, grid)
        rho = np.exp(np.minimum(-f, _LOG_MAX))
        rho_pow = np.exp(np.minimum(-(1.0 + eps) * f, _LOG_MAX))
        rho_m.update(rho)
        pow_m.update(rho_pow)
        pow_values.append(rho_pow)
    pow_values = np.concatenate(pow_values)
    partial = np.cumsum(pow_values) / np.arange(1, count + 1)
    tail = partial[count // 2 :]
    fluct = float((tail.max() - tail.min()) / abs(tail.mean())) if tail.mean() != 0 else 0.0
    return GirsanovStats(
        mean_rho=rho_m.mean,
        stderr_rho=rho_m.stderr,
        mean_rho_pow=pow_m.mean,
        stderr_rho_pow=pow_m.stderr,
        eps=float(eps),
        count=count,
        h1_consistent=abs(rho_m.mean - 1.0) <= 3.0 * rho_m.stderr,
        h2_stable=fluct < 0.10,
        h2_fluctuation=fluct,
    )
