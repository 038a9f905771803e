"""Discretized two-floor Wiener space.

The lower floor is the path space on an ``m``-step grid of ``[0, 1]`` in
dimension ``d``; the upper floor is a path-valued Brownian motion (a Brownian
sheet) on an ``n``-step grid. Paths are stored as Gaussian increments so that
Wiener measure is an i.i.d. product and Cameron-Martin shifts act
coordinate-wise.

Array conventions used throughout the package:

* lower path increments: ``(..., m, d)``
* Cameron-Martin densities: ``(..., m, d)``
* sheet upper increments: ``(..., n, m, d)``; slice ``B[i]`` is the cumulative
  sum of the first ``i`` upper increments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, ShapeError, ValidationError

__all__ = [
    "TimeGrid",
    "RngStream",
    "LowerPath",
    "CMVector",
    "UpperSheet",
    "SheetBatch",
    "sample_lower_path",
    "sample_lower_paths",
    "sample_sheet",
    "sample_sheets",
    "cm_inner",
    "paley_wiener",
    "shift",
    "embedding",
    "nodal_values",
    "increments_from_nodal",
    "dump_path",
    "load_path",
    "dump_sheet",
    "load_sheet",
    "dump_slices",
    "load_slices",
    "SERIAL_VERSION",
]

SERIAL_VERSION = 1
_HEADER = struct.Struct("<4I")


@dataclass(frozen=True)
class TimeGrid:
    """Lower (path time) and upper (transport time) grids on ``[0, 1]``."""

    m: int
    n: int
    d: int = 1

    def __post_init__(self):
        for name in ("m", "n", "d"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValidationError(f"{name} must be an integer, got {value!r}", field=name)
            if value < 1:
                raise ValidationError(f"{name} must be >= 1, got {value}", field=name)
            object.__setattr__(self, name, int(value))

    @property
    def dt(self) -> float:
        """Lower mesh ``1/m``."""
        return 1.0 / self.m

    @property
    def ds(self) -> float:
        """Upper mesh ``1/n``."""
        return 1.0 / self.n

    @property
    def lower_times(self) -> np.ndarray:
        return np.arange(self.m + 1) / self.m

    @property
    def left_times(self) -> np.ndarray:
        """Left endpoints ``t_{k-1}`` of the lower intervals."""
        return np.arange(self.m) / self.m

    @property
    def upper_times(self) -> np.ndarray:
        return np.arange(self.n + 1) / self.n

    @property
    def path_shape(self) -> tuple:
        return (self.m, self.d)

    @property
    def sheet_shape(self) -> tuple:
        return (self.n, self.m, self.d)

    def upper_index(self, s: float) -> int:
        """Index of the upper grid node nearest to ``s``."""
        return int(round(float(s) * self.n))

    def snap(self, s: float) -> float:
        return self.upper_index(s) / self.n


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream addressed by ``(seed, stream id)``.

    ``child`` derives independent sub-streams, e.g. one per upper time step,
    so that identical keys always reproduce identical draws.
    """

    seed: int
    stream: int = 0
    path: tuple = ()

    def __post_init__(self):
        for name in ("seed", "stream"):
            value = int(getattr(self, name))
            if not 0 <= value < 2**64:
                raise ValidationError(f"{name} must fit in 64 unsigned bits", field=name)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "path", tuple(int(k) for k in self.path))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream,) + self.path)
        return np.random.Generator(np.random.PCG64(seq))

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def nodal_values(increments: np.ndarray) -> np.ndarray:
    """Prefix sums along the lower axis with a leading zero row."""
    x = np.asarray(increments, dtype=float)
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 1, x.shape[-1]))
    np.cumsum(x, axis=-2, out=out[..., 1:, :])
    return out


def increments_from_nodal(nodal: np.ndarray) -> np.ndarray:
    """Increments whose sequential prefix sum reproduces ``nodal`` bit for bit.

    ``nodal[..., 0, :]`` must be zero. Plain differencing can be off by one
    ulp after re-summation; such entries are nudged until the running sum
    lands exactly on the requested node. Exactness needs reachable nodes,
    which holds whenever they are themselves float prefix sums.
    """
    c = np.asarray(nodal, dtype=float)
    if np.any(c[..., 0, :] != 0.0):
        raise ValidationError("nodal values must start at the origin")
    x = np.diff(c, axis=-2)
    m = x.shape[-2]
    acc = np.zeros(c.shape[:-2] + (c.shape[-1],))
    for k in range(m):
        target = c[..., k + 1, :]
        xk = x[..., k, :]
        for _ in range(8):
            got = acc + xk
            bad = got != target
            if not np.any(bad):
                break
            xk = np.where(bad, np.where(got < target, np.nextafter(xk, np.inf), np.nextafter(xk, -np.inf)), xk)
        x[..., k, :] = xk
        acc = acc + xk
    return x


@dataclass(frozen=True, eq=False)
class LowerPath:
    """Discretized Wiener path stored as increments ``x[k, j]``."""

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        x = _frozen(self.increments)
        if x.shape != self.grid.path_shape:
            raise ShapeError(f"increments shape {x.shape} != {self.grid.path_shape}")
        object.__setattr__(self, "increments", x)

    @classmethod
    def zero(cls, grid: TimeGrid) -> "LowerPath":
        return cls(grid, np.zeros(grid.path_shape))

    @classmethod
    def from_nodal(cls, grid: TimeGrid, nodal) -> "LowerPath":
        return cls(grid, increments_from_nodal(nodal))

    def nodal(self) -> np.ndarray:
        """``W(t_k)`` for ``k = 0..m`` with ``W(t_0) = 0``."""
        return nodal_values(self.increments)

    def sup_norm(self) -> float:
        return float(np.abs(self.nodal()).max())

    def __eq__(self, other):
        return (
            isinstance(other, LowerPath)
            and self.grid == other.grid
            and np.array_equal(self.increments, other.increments)
        )

    def __hash__(self):
        return hash((self.grid, self.increments.tobytes()))


@dataclass(frozen=True, eq=False)
class CMVector:
    """Cameron-Martin element stored as its per-interval density."""

    grid: TimeGrid
    density: np.ndarray

    def __post_init__(self):
        h = _frozen(self.density)
        if h.shape != self.grid.path_shape:
            raise ShapeError(f"density shape {h.shape} != {self.grid.path_shape}")
        object.__setattr__(self, "density", h)

    @classmethod
    def zero(cls, grid: TimeGrid) -> "CMVector":
        return cls(grid, np.zeros(grid.path_shape))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "CMVector":
        return cls(grid, np.broadcast_to(np.asarray(value, dtype=float), grid.path_shape))

    def norm2(self) -> float:
        return float(np.sum(self.density**2) * self.grid.dt)

    def norm(self) -> float:
        return float(np.sqrt(self.norm2()))

    def __add__(self, other: "CMVector") -> "CMVector":
        _check_same(self.grid, other.grid)
        return CMVector(self.grid, self.density + other.density)

    def __sub__(self, other: "CMVector") -> "CMVector":
        _check_same(self.grid, other.grid)
        return CMVector(self.grid, self.density - other.density)

    def __neg__(self) -> "CMVector":
        return CMVector(self.grid, -self.density)

    def __mul__(self, a: float) -> "CMVector":
        return CMVector(self.grid, self.density * float(a))

    __rmul__ = __mul__

    def __eq__(self, other):
        return (
            isinstance(other, CMVector)
            and self.grid == other.grid
            and np.array_equal(self.density, other.density)
        )

    def __hash__(self):
        return hash((self.grid, self.density.tobytes()))


def _check_same(g1: TimeGrid, g2: TimeGrid) -> None:
    if g1 != g2:
        raise ShapeError(f"grid mismatch: {g1} vs {g2}")


def embedding(h: CMVector) -> LowerPath:
    """Embed ``h`` into path space: ``x[k] = hdot[k] * dt``."""
    return LowerPath(h.grid, h.density * h.grid.dt)


def cm_inner(h: CMVector, k: CMVector) -> float:
    """Cameron-Martin inner product ``sum hdot . kdot * dt``."""
    _check_same(h.grid, k.grid)
    return float(np.sum(h.density * k.density) * h.grid.dt)


def paley_wiener(h: CMVector, w: LowerPath) -> float:
    """Discrete Wiener integral ``I(h)(w) = sum_k hdot[k] . x[k]``."""
    _check_same(h.grid, w.grid)
    return float(np.sum(h.density * w.increments))


def shift(w: LowerPath, h: CMVector) -> LowerPath:
    """Cameron-Martin translate ``w + h``."""
    _check_same(w.grid, h.grid)
    return LowerPath(w.grid, w.increments + h.density * w.grid.dt)


def sample_lower_paths(grid: TimeGrid, s: float, count: int, rng: RngStream) -> np.ndarray:
    """``count`` increment arrays of law ``mu_s``, shape ``(count, m, d)``."""
    s = float(s)
    if not s >= 0.0:
        raise DomainError(f"variance must be >= 0, got {s}")
    if s == 0.0:
        return np.zeros((count,) + grid.path_shape)
    return np.sqrt(s * grid.dt) * rng.normal((count,) + grid.path_shape)


def sample_lower_path(grid: TimeGrid, s: float, rng: RngStream) -> LowerPath:
    """One path with independent ``N(0, s * dt)`` increments."""
    return LowerPath(grid, sample_lower_paths(grid, s, 1, rng)[0])


@dataclass(frozen=True, eq=False)
class UpperSheet:
    """Path-valued Brownian motion stored as upper increments ``dB[i]``."""

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        x = _frozen(self.increments)
        if x.shape != self.grid.sheet_shape:
            raise ShapeError(f"sheet shape {x.shape} != {self.grid.sheet_shape}")
        object.__setattr__(self, "increments", x)

    @classmethod
    def zero(cls, grid: TimeGrid) -> "UpperSheet":
        return cls(grid, np.zeros(grid.sheet_shape))

    @classmethod
    def from_slices(cls, grid: TimeGrid, slices) -> "UpperSheet":
        b = np.asarray(slices, dtype=float)
        if np.any(b[0] != 0.0):
            raise ValidationError("slice 0 must be the zero path")
        return cls(grid, np.diff(b, axis=0))

    def slices(self) -> np.ndarray:
        """Lower increments of every slice ``B[0..n]``, shape ``(n+1, m, d)``."""
        out = np.zeros((self.grid.n + 1,) + self.grid.path_shape)
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def slice(self, i: int) -> LowerPath:
        return LowerPath(self.grid, self.slices()[i])

    def terminal(self) -> LowerPath:
        return self.slice(self.grid.n)

    def __eq__(self, other):
        return (
            isinstance(other, UpperSheet)
            and self.grid == other.grid
            and np.array_equal(self.increments, other.increments)
        )

    def __hash__(self):
        return hash((self.grid, self.increments.tobytes()))


@dataclass(frozen=True, eq=False)
class SheetBatch:
    """A stack of independent sheets, increments of shape ``(S, n, m, d)``."""

    grid: TimeGrid
    increments: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = _frozen(self.increments)
        if x.ndim != 4 or x.shape[1:] != self.grid.sheet_shape:
            raise ShapeError(f"batch shape {x.shape} incompatible with {self.grid.sheet_shape}")
        object.__setattr__(self, "increments", x)

    @classmethod
    def of(cls, sheets: Sequence[UpperSheet]) -> "SheetBatch":
        grid = sheets[0].grid
        for s in sheets:
            _check_same(grid, s.grid)
        return cls(grid, np.stack([s.increments for s in sheets]))

    def __len__(self) -> int:
        return self.increments.shape[0]

    def __getitem__(self, j: int) -> UpperSheet:
        return UpperSheet(self.grid, self.increments[j])

    def __iter__(self) -> Iterator[UpperSheet]:
        for j in range(len(self)):
            yield self[j]

    def slices(self) -> np.ndarray:
        """Shape ``(S, n+1, m, d)``."""
        x = self.increments
        out = np.zeros((x.shape[0], x.shape[1] + 1) + x.shape[2:])
        np.cumsum(x, axis=1, out=out[:, 1:])
        return out

    def terminal(self) -> np.ndarray:
        return self.increments.sum(axis=1)


def as_batch(sheets) -> tuple[SheetBatch, bool]:
    """Normalize a sheet or batch; the flag records whether a single sheet came in."""
    if isinstance(sheets, UpperSheet):
        return SheetBatch(sheets.grid, sheets.increments[None]), True
    if isinstance(sheets, SheetBatch):
        return sheets, False
    return SheetBatch.of(list(sheets)), False


def sample_sheets(grid: TimeGrid, count: int, rng: RngStream) -> SheetBatch:
    """``count`` independent sheets; each upper increment has variance ``ds * dt``."""
    scale = np.sqrt(grid.ds * grid.dt)
    return SheetBatch(grid, scale * rng.normal((count,) + grid.sheet_shape))


def sample_sheet(grid: TimeGrid, rng: RngStream) -> UpperSheet:
    return sample_sheets(grid, 1, rng)[0]


# Serialization: 16-byte header (m, n, d, version) as little-endian uint32,
# then little-endian float64 payload in row-major order. A single path is
# written with n = 0 in the header.


def _write(header, payload: np.ndarray) -> bytes:
    return _HEADER.pack(*header) + np.ascontiguousarray(payload, dtype="<f8").tobytes()


def _read(data: bytes):
    if len(data) < _HEADER.size:
        raise ValidationError("truncated header")
    m, n, d, version = _HEADER.unpack_from(data)
    if version != SERIAL_VERSION:
        raise ValidationError(f"unsupported serialization version {version}")
    payload = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    return m, n, d, payload


def dump_path(w: LowerPath) -> bytes:
    g = w.grid
    return _write((g.m, 0, g.d, SERIAL_VERSION), w.increments)


def load_path(data: bytes, grid: TimeGrid | None = None) -> LowerPath:
    m, n, d, payload = _read(data)
    if n != 0:
        raise ValidationError("payload is not a single path")
    if payload.size != m * d:
        raise ValidationError("payload length does not match header")
    grid = grid or TimeGrid(m, 1, d)
    if (grid.m, grid.d) != (m, d):
        raise ShapeError("grid does not match header")
    return LowerPath(grid, payload.reshape(m, d))


def dump_sheet(sheet: UpperSheet) -> bytes:
    g = sheet.grid
    return _write((g.m, g.n, g.d, SERIAL_VERSION), sheet.increments)


def load_sheet(data: bytes) -> UpperSheet:
    m, n, d, payload = _read(data)
    if n == 0 or payload.size != n * m * d:
        raise ValidationError("payload length does not match header")
    return UpperSheet(TimeGrid(m, n, d), payload.reshape(n, m, d))


def dump_slices(grid: TimeGrid, slices: np.ndarray) -> bytes:
    """Write selected slices (lower increments, shape ``(k, m, d)``) of a sheet."""
    s = np.asarray(slices, dtype=float)
    if s.ndim != 3 or s.shape[1:] != grid.path_shape:
        raise ShapeError("slices must have shape (k, m, d)")
    return _write((grid.m, s.shape[0], grid.d, SERIAL_VERSION), s)


def load_slices(data: bytes) -> np.ndarray:
    m, k, d, payload = _read(data)
    if payload.size != k * m * d:
        raise ValidationError("payload length does not match header")
    return payload.reshape(k, m, d)
