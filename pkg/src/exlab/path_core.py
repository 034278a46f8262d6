"""Uniform time grids, reproducible random sources, and exact-distribution
samplers for the elementary processes (Brownian motion, bridge, meander,
Bessel(3) bridge, normalized excursion).

All samplers are pure functions of ``(grid, parameters, RandomSource)``; the
``*_batch`` variants return one path per row and are the building blocks of
every Monte Carlo loop in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_points`` times spanning ``[t_start, t_end]`` in [0,1].

    Both endpoints are grid points; ``spacing = (t_end - t_start)/(n_points - 1)``.
    """

    t_start: float
    t_end: float
    n_points: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.t_start < self.t_end <= 1.0):
            raise ValueError(
                f"need 0 <= t_start < t_end <= 1, got [{self.t_start}, {self.t_end}]"
            )
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"n_points must be an integer >= 2, got {self.n_points}")

    @classmethod
    def unit(cls, n_points: int) -> "TimeGrid":
        """Grid on the whole interval [0, 1]."""
        return cls(0.0, 1.0, n_points)

    @property
    def spacing(self) -> float:
        return (self.t_end - self.t_start) / (self.n_points - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_points)

    @property
    def quad_weights(self) -> np.ndarray:
        """Trapezoid quadrature weights against the grid points."""
        w = np.full(self.n_points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the grid point equal to ``t`` (within ``tol``), else ValueError."""
        pos = (t - self.t_start) / self.spacing
        i = int(round(pos))
        if i < 0 or i >= self.n_points or abs(pos - i) * self.spacing > tol:
            raise ValueError(f"{t} is not a grid point of {self}")
        return i


@dataclass
class SamplePath:
    """A real-valued function sampled on a :class:`TimeGrid`.

    Values between grid points are defined by linear interpolation, consistent
    with trapezoid quadrature.
    """

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_points,):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid "
                f"n_points {self.grid.n_points}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path values must be finite")

    def value_at(self, t: float) -> float:
        """Linearly interpolated value at time ``t`` inside the grid span."""
        if not (self.grid.t_start - 1e-12 <= t <= self.grid.t_end + 1e-12):
            raise ValueError(f"time {t} outside grid span")
        return float(np.interp(t, self.grid.points, self.values))


@dataclass(frozen=True)
class RandomSource:
    """Seedable source of randomness: (seed, stream, lane) fixes the values.

    Distinct stream ids on the same seed give independent streams; ensemble
    code fans out over stream ids and reduces in a fixed chunk order, so
    results do not depend on worker count.  ``child(k)`` descends one level
    (independent of every stream and of other children), for samplers that
    need several generators per chunk without colliding with stream shifts.
    """

    seed: int
    stream: int = 0
    lane: tuple = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream, *self.lane)
        )
        return np.random.Generator(np.random.PCG64(ss))

    def shifted(self, offset: int) -> "RandomSource":
        """The source on stream ``stream + offset`` of the same seed."""
        return RandomSource(self.seed, self.stream + offset, self.lane)

    def child(self, *keys: int) -> "RandomSource":
        """An independent sub-source one level down from this one."""
        return RandomSource(self.seed, self.stream, self.lane + keys)


def path_average(p: SamplePath) -> float:
    """Trapezoid quadrature of the path over its grid span."""
    return float(p.values @ p.grid.quad_weights)


# ---------------------------------------------------------------------------
# batch samplers (one path per row)
# ---------------------------------------------------------------------------

def _bm_rows(grid: TimeGrid, gen: np.random.Generator, size: int) -> np.ndarray:
    dW = gen.standard_normal((size, grid.n_points - 1)) * np.sqrt(grid.spacing)
    out = np.empty((size, grid.n_points))
    out[:, 0] = 0.0
    np.cumsum(dW, axis=1, out=out[:, 1:])
    return out


def _bridge_rows(
    grid: TimeGrid, a, b, gen: np.random.Generator, size: int
) -> np.ndarray:
    """Brownian bridge rows from ``a`` to ``b`` (scalars or per-row arrays)."""
    w = _bm_rows(grid, gen, size)
    u = (grid.points - grid.t_start) / (grid.t_end - grid.t_start)
    a = np.asarray(a, dtype=float).reshape(-1, 1) if np.ndim(a) else float(a)
    b = np.asarray(b, dtype=float).reshape(-1, 1) if np.ndim(b) else float(b)
    bridge = w - np.outer(w[:, -1], u)
    return bridge + a + (b - a) * u


def _bessel3_rows(
    grid: TimeGrid, a, b, gen: np.random.Generator, size: int
) -> np.ndarray:
    """Norm of a 3-d Brownian bridge from (a,0,0) to (b,0,0), rowwise."""
    x = _bridge_rows(grid, a, b, gen, size)
    y = _bridge_rows(grid, 0.0, 0.0, gen, size)
    z = _bridge_rows(grid, 0.0, 0.0, gen, size)
    return np.sqrt(x * x + y * y + z * z)


def _meander_rows(grid: TimeGrid, gen: np.random.Generator, size: int) -> np.ndarray:
    # Endpoint first: the terminal value has the Rayleigh law, and given it
    # the path is a Bessel(3) bridge from 0.
    end = np.sqrt(2.0 * gen.exponential(size=size))
    return _bessel3_rows(grid, 0.0, end, gen, size)


def _require_unit(grid: TimeGrid, name: str) -> None:
    if grid.t_start != 0.0 or grid.t_end != 1.0:
        raise ValueError(f"{name} sampler needs a grid spanning [0, 1], got {grid}")


def brownian_motion_batch(grid: TimeGrid, rs: RandomSource, size: int) -> np.ndarray:
    """``size`` Brownian motion paths started at 0, one per row."""
    return _bm_rows(grid, rs.generator(), size)


def brownian_bridge_batch(grid: TimeGrid, a, b, rs: RandomSource, size: int) -> np.ndarray:
    """``size`` Brownian bridge paths from ``a`` to ``b`` over the grid span.

    ``a`` and ``b`` may be scalars or length-``size`` arrays (one endpoint
    pair per row). Endpoint values are exact.
    """
    return _bridge_rows(grid, a, b, rs.generator(), size)


def bessel3_bridge_batch(grid: TimeGrid, a, b, rs: RandomSource, size: int) -> np.ndarray:
    """``size`` Bessel(3) bridge paths between nonnegative endpoints."""
    return _bessel3_rows(grid, a, b, rs.generator(), size)


def meander_batch(grid: TimeGrid, rs: RandomSource, size: int) -> np.ndarray:
    """``size`` standard Brownian meander paths on the unit grid."""
    _require_unit(grid, "meander")
    return _meander_rows(grid, rs.generator(), size)


# ---------------------------------------------------------------------------
# single-path sampler operations
# ---------------------------------------------------------------------------

def sample_brownian_motion(grid: TimeGrid, rs: RandomSource) -> SamplePath:
    """One standard Brownian motion path: value 0 at the grid start,
    independent N(0, spacing) increments."""
    return SamplePath(grid, brownian_motion_batch(grid, rs, 1)[0])


def sample_brownian_bridge(
    grid: TimeGrid, a: float, b: float, rs: RandomSource
) -> SamplePath:
    """One Brownian bridge path from ``a`` to ``b`` over the grid span."""
    return SamplePath(grid, brownian_bridge_batch(grid, a, b, rs, 1)[0])


def sample_meander(grid: TimeGrid, rs: RandomSource) -> SamplePath:
    """One standard Brownian meander path (nonnegative, starts at 0)."""
    return SamplePath(grid, meander_batch(grid, rs, 1)[0])


def sample_bessel3_bridge(
    grid: TimeGrid, a: float, b: float, rs: RandomSource
) -> SamplePath:
    """One Bessel(3) bridge path between nonnegative endpoints ``a``, ``b``.

    With ``a = b = 0`` on [0,1] this is the normalized Brownian excursion.
    """
    if a < 0 or b < 0:
        raise ValueError("Bessel(3) bridge endpoints must be nonnegative")
    return SamplePath(grid, bessel3_bridge_batch(grid, a, b, rs, 1)[0])
