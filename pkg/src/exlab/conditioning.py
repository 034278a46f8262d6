"""Conditioning nonnegative path laws on their time average.

The machinery has three layers:

1. A generic Gaussian linear-conditioning kit: two signed measures splitting
   a path functional into a "pinned" part and its complement, the kernel
   responses to each, and the affine maps that realize conditioning either
   exactly (``conditioned``) or through an equivalent reweighted proposal
   (``proposal`` + ``importance_weight``).

2. Two concrete kits — the Brownian bridge conditioned on its average (the
   excursion side) and Brownian motion conditioned on its average (the
   meander side) — plus explicit glued-path proposal constructions whose
   reweighted, sign-constrained laws realize the conditioned excursion and
   meander.

3. Monte Carlo estimators built on the proposals: the density of the time
   average of the excursion / meander, and self-normalized conditional
   expectations under the average-pinned excursion law.

Estimator grids: the proposal constructions glue pieces at 1/3 and 2/3
(excursion) or 1/2 (meander), so their full grids have ``3k+1`` or ``2k+1``
points and contain the junctions exactly; the default is 1537 points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from exlab import _mc
from exlab.operators import KernelOperator, kernel_brownian_motion, kernel_QD
from exlab.path_core import (
    RandomSource,
    SamplePath,
    TimeGrid,
    _bm_rows,
    _bridge_rows,
    _meander_rows,
    path_average,
)

DEFAULT_GRID_POINTS = 1537

# Normalizing constants of the two average densities.
EXCURSION_DENSITY_CONST = 27.0 * math.sqrt(6.0 / math.pi**3)
MEANDER_DENSITY_CONST = math.sqrt(24.0 / math.pi)


# ---------------------------------------------------------------------------
# signed measures and pairing
# ---------------------------------------------------------------------------

@dataclass
class SignedMeasureOnUnit:
    """A signed measure on the grid span: a density part (values per grid
    point, paired by trapezoid quadrature) plus point atoms ``(location,
    weight)`` (paired by linear interpolation of the path)."""

    grid: TimeGrid
    density: np.ndarray = field(repr=False)
    atoms: tuple = ()

    def __post_init__(self) -> None:
        self.density = np.asarray(self.density, dtype=float)
        if self.density.shape != (self.grid.n_points,):
            raise ValueError("density must have one value per grid point")
        self.atoms = tuple((float(t), float(w)) for t, w in self.atoms)
        for t, _ in self.atoms:
            if not (self.grid.t_start <= t <= self.grid.t_end):
                raise ValueError(f"atom location {t} outside grid span")
        self._vector = None

    @property
    def functional_vector(self) -> np.ndarray:
        """Grid vector ``v`` with ``v . values = ∫ path d(measure)``."""
        if self._vector is None:
            v = self.grid.quad_weights * self.density
            for t, w in self.atoms:
                v += w * _point_eval_vector(self.grid, t)
            self._vector = v
        return self._vector


def pair(measure: SignedMeasureOnUnit, p: SamplePath) -> float:
    """Canonical pairing ``∫ p d(measure)``."""
    if p.grid != measure.grid:
        raise ValueError("path and measure grids differ")
    return float(p.values @ measure.functional_vector)


def q_transform(q: KernelOperator, measure: SignedMeasureOnUnit) -> SamplePath:
    """Kernel response ``t -> ∫ q(t, s) d(measure)(s)``, atoms included."""
    if q.grid != measure.grid:
        raise ValueError("kernel and measure grids differ")
    return SamplePath(q.grid, q.matrix @ measure.functional_vector)


# ---------------------------------------------------------------------------
# interpolation / partial-interval quadrature vectors
# ---------------------------------------------------------------------------

def _point_eval_vector(grid: TimeGrid, t: float) -> np.ndarray:
    """Vector ``e`` with ``e . values = `` the path linearly interpolated at t."""
    v = np.zeros(grid.n_points)
    pos = (t - grid.t_start) / grid.spacing
    i = int(np.floor(pos))
    i = min(max(i, 0), grid.n_points - 2)
    f = pos - i
    if f < 1e-12:
        v[i] = 1.0
    else:
        v[i] = 1.0 - f
        v[i + 1] = f
    return v


def _interval_integral_vector(grid: TimeGrid, lo: float, hi: float) -> np.ndarray:
    """Vector ``w`` with ``w . values ≈ ∫_lo^hi values dt`` — trapezoid on
    whole cells, linear-interpolation trapezoid on the fractional end cells."""
    if not (grid.t_start - 1e-12 <= lo <= hi <= grid.t_end + 1e-12):
        raise ValueError("integration limits outside grid span")
    h = grid.spacing
    w = np.zeros(grid.n_points)

    def cut(t: float) -> tuple[int, float]:
        pos = (t - grid.t_start) / h
        i = int(np.floor(pos + 1e-12))
        i = min(max(i, 0), grid.n_points - 1)
        return i, pos - i

    i_lo, f_lo = cut(lo)
    i_hi, f_hi = cut(hi)
    # whole cells strictly between the cut cells
    first_full = i_lo + (1 if f_lo > 1e-12 else 0)
    for k in range(first_full, i_hi):
        w[k] += 0.5 * h
        w[k + 1] += 0.5 * h
    # fractional piece at the lower end: from lo up to node first_full
    if f_lo > 1e-12:
        d = (1.0 - f_lo) * h
        v_lo = _point_eval_vector(grid, lo)
        w += 0.5 * d * v_lo
        w[i_lo + 1] += 0.5 * d
    # fractional piece at the upper end: from node i_hi up to hi
    if f_hi > 1e-12:
        d = f_hi * h
        v_hi = _point_eval_vector(grid, hi)
        w += 0.5 * d * v_hi
        w[i_hi] += 0.5 * d
    return w


@lru_cache(maxsize=32)
def _excursion_average_vector(grid: TimeGrid) -> np.ndarray:
    """Functional ``ω -> ∫_0^{1/3} ω + ∫_{2/3}^1 ω + (ω(1/3) + ω(2/3))/6``
    (the pinned outer-average statistic of the excursion kit, unit-scaled)."""
    v = _interval_integral_vector(grid, 0.0, 1.0 / 3.0)
    v = v + _interval_integral_vector(grid, 2.0 / 3.0, 1.0)
    v = v + _point_eval_vector(grid, 1.0 / 3.0) / 6.0
    v = v + _point_eval_vector(grid, 2.0 / 3.0) / 6.0
    return v


@lru_cache(maxsize=32)
def _meander_average_vector(grid: TimeGrid) -> np.ndarray:
    """Functional ``ω -> ∫_0^{1/2} ω + ω(1/2)/2`` (meander-side statistic)."""
    v = _interval_integral_vector(grid, 0.0, 0.5)
    v = v + _point_eval_vector(grid, 0.5) / 2.0
    return v


@lru_cache(maxsize=32)
def _excursion_pin_profile(grid: TimeGrid) -> np.ndarray:
    """``18 (9 t (1 - t) - 2)`` on [1/3, 2/3], zero outside: integrates to 1
    over the middle third and vanishes at both junctions."""
    t = grid.points
    g = 18.0 * (9.0 * t * (1.0 - t) - 2.0)
    g[(t < 1.0 / 3.0) | (t > 2.0 / 3.0)] = 0.0
    return np.maximum(g, 0.0)


@lru_cache(maxsize=32)
def _meander_pin_profile(grid: TimeGrid) -> np.ndarray:
    """``12 t (2 - t) - 9`` on [1/2, 1], zero before: integrates to 1 over
    [1/2, 1] and vanishes at the junction."""
    t = grid.points
    g = 12.0 * t * (2.0 - t) - 9.0
    g[t < 0.5] = 0.0
    return np.maximum(g, 0.0)


@lru_cache(maxsize=32)
def _excursion_pin_profile_discrete(grid: TimeGrid) -> np.ndarray:
    """The middle pin profile scaled to unit trapezoid mass, so that pinning
    with it drives the discrete average to the target exactly (the raw
    analytic profile is off by O(spacing^2), visible to the degenerate
    average functional)."""
    g = _excursion_pin_profile(grid)
    return g / float(grid.quad_weights @ g)


@lru_cache(maxsize=32)
def _meander_pin_profile_discrete(grid: TimeGrid) -> np.ndarray:
    """The second-half pin profile scaled to unit trapezoid mass (see
    ``_excursion_pin_profile_discrete``)."""
    g = _meander_pin_profile(grid)
    return g / float(grid.quad_weights @ g)


# ---------------------------------------------------------------------------
# the generic linear-conditioning kit
# ---------------------------------------------------------------------------

@dataclass
class ConditioningKit:
    """Everything needed to condition a centered Gaussian path law on the
    affine statistic split across two measures.

    ``pinned_measure`` carries the statistic being driven to ``target``;
    ``complement_measure`` completes it so that the two kernel responses are
    orthogonal and their variances sum to one.  ``pinned_variance`` is the
    variance the kernel assigns to the pinned statistic; the proposal map is
    degenerate as it approaches 1.
    """

    kernel: KernelOperator
    pinned_measure: SignedMeasureOnUnit
    complement_measure: SignedMeasureOnUnit
    target: float
    pinned_response: SamplePath
    complement_response: SamplePath
    pinned_variance: float
    residual_orthogonality: float
    residual_normalization: float

    @property
    def grid(self) -> TimeGrid:
        return self.kernel.grid

    def pinned_value(self, values: np.ndarray):
        """The pinned statistic of a path (batch rows allowed)."""
        return np.asarray(values, dtype=float) @ self.pinned_measure.functional_vector

    def complement_value(self, values: np.ndarray):
        """The complementary statistic of a path (batch rows allowed)."""
        return (
            np.asarray(values, dtype=float)
            @ self.complement_measure.functional_vector
        )

    def _gap(self, values: np.ndarray):
        return self.target - self.pinned_value(values) - self.complement_value(values)

    def conditioned(self, values: np.ndarray) -> np.ndarray:
        """Exact conditioned path: shift along both responses until the full
        statistic hits the target (batch rows allowed)."""
        v = np.asarray(values, dtype=float)
        prof = self.pinned_response.values + self.complement_response.values
        return v + np.multiply.outer(self._gap(v), prof)

    def proposal(self, values: np.ndarray) -> np.ndarray:
        """Proposal path: shift along the complement response only.  Its
        reweighted law (``importance_weight``) matches the conditioned law,
        and it leaves the pinned statistic of the input untouched."""
        v = np.asarray(values, dtype=float)
        coef = self._gap(v) / (1.0 - self.pinned_variance)
        return v + np.multiply.outer(coef, self.complement_response.values)

    def importance_weight(self, values: np.ndarray):
        """Density of the conditioned law against the proposal law, as a
        function of the path (batch rows allowed); strictly positive."""
        one_minus = 1.0 - self.pinned_variance
        dev = self.pinned_value(values) - self.target
        return np.exp(
            -(dev**2) / (2.0 * one_minus) + self.target**2 / 2.0
        ) / math.sqrt(one_minus)

    def conditioned_path(self, p: SamplePath) -> SamplePath:
        return SamplePath(self.grid, self.conditioned(p.values))

    def proposal_path(self, p: SamplePath) -> SamplePath:
        return SamplePath(self.grid, self.proposal(p.values))


def build_conditioning_kit(
    kernel: KernelOperator,
    pinned: SignedMeasureOnUnit,
    complement: SignedMeasureOnUnit,
    target: float,
    tol: float = 1e-6,
) -> ConditioningKit:
    """Assemble and validate a conditioning kit.

    The two measures must satisfy, within ``tol``: the kernel responses are
    orthogonal (pinned response integrated against the complement measure is
    zero) and the two response variances sum to one.  Violations raise with
    both residuals; a pinned variance ≥ 1 is degenerate and also raises.
    """
    if pinned.grid != kernel.grid or complement.grid != kernel.grid:
        raise ValueError("measures and kernel must share one grid")
    lam_vec = pinned.functional_vector
    mu_vec = complement.functional_vector
    lam_resp = kernel.matrix @ lam_vec
    mu_resp = kernel.matrix @ mu_vec
    pinned_var = float(lam_vec @ lam_resp)
    cross = float(mu_vec @ lam_resp)
    comp_var = float(mu_vec @ mu_resp)
    r_orth = abs(cross)
    r_norm = abs(pinned_var + comp_var - 1.0)
    if r_orth > tol or r_norm > tol:
        raise ValueError(
            "measure pair fails the conditioning constraints: "
            f"|cross response| = {r_orth:.3e}, "
            f"|variance sum - 1| = {r_norm:.3e} (tol {tol:.1e})"
        )
    if pinned_var >= 1.0:
        raise ValueError(
            f"degenerate kit: pinned variance {pinned_var} >= 1"
        )
    return ConditioningKit(
        kernel=kernel,
        pinned_measure=pinned,
        complement_measure=complement,
        target=float(target),
        pinned_response=SamplePath(kernel.grid, lam_resp),
        complement_response=SamplePath(kernel.grid, mu_resp),
        pinned_variance=pinned_var,
        residual_orthogonality=r_orth,
        residual_normalization=r_norm,
    )


def _default_grid(grid: TimeGrid | None) -> TimeGrid:
    return grid if grid is not None else TimeGrid.unit(DEFAULT_GRID_POINTS)


def excursion_average_kit(c: float, grid: TimeGrid | None = None) -> ConditioningKit:
    """Kit conditioning the Brownian bridge on time average ``c``.

    The pinned measure carries the two outer thirds plus half-atoms at the
    junctions; the complement carries the middle third minus those atoms.
    The grid must contain 1/3 and 2/3 as points and be fine enough for the
    constraint residuals (the 1537-point default gives ~4e-7).
    """
    grid = _default_grid(grid)
    s = math.sqrt(12.0)
    i1 = grid.index_of(1.0 / 3.0)
    i2 = grid.index_of(2.0 / 3.0)
    n = grid.n_points
    idx = np.arange(n)
    dens_out = np.where((idx < i1) | (idx > i2), s, 0.0)
    dens_out[[i1, i2]] = s / 2.0  # midpoint value at the density jump
    dens_in = np.where((idx > i1) & (idx < i2), s, 0.0)
    dens_in[[i1, i2]] = s / 2.0
    pinned = SignedMeasureOnUnit(
        grid, dens_out, atoms=((1.0 / 3.0, s / 6.0), (2.0 / 3.0, s / 6.0))
    )
    complement = SignedMeasureOnUnit(
        grid, dens_in, atoms=((1.0 / 3.0, -s / 6.0), (2.0 / 3.0, -s / 6.0))
    )
    return build_conditioning_kit(kernel_QD(grid), pinned, complement, s * c)


def meander_average_kit(c: float, grid: TimeGrid | None = None) -> ConditioningKit:
    """Kit conditioning Brownian motion on time average ``c``.

    The pinned measure carries [0, 1/2] plus a half-atom at 1/2; the
    complement carries [1/2, 1] minus that atom.  Grid must contain 1/2.
    """
    grid = _default_grid(grid)
    s = math.sqrt(3.0)
    ih = grid.index_of(0.5)
    n = grid.n_points
    idx = np.arange(n)
    dens_lo = np.where(idx < ih, s, 0.0)
    dens_lo[ih] = s / 2.0
    dens_hi = np.where(idx > ih, s, 0.0)
    dens_hi[ih] = s / 2.0
    pinned = SignedMeasureOnUnit(grid, dens_lo, atoms=((0.5, s / 2.0),))
    complement = SignedMeasureOnUnit(grid, dens_hi, atoms=((0.5, -s / 2.0),))
    return build_conditioning_kit(
        kernel_brownian_motion(grid), pinned, complement, s * c
    )


# ---------------------------------------------------------------------------
# average-pinning path transforms
# ---------------------------------------------------------------------------

def pin_average_middle(omega: SamplePath, c: float) -> SamplePath:
    """Drive the path's average to ``c`` by an affine correction supported on
    the middle third (identity outside [1/3, 2/3]); the correction profile
    vanishes at both junctions, so continuity there is preserved."""
    g = _excursion_pin_profile(omega.grid)
    return SamplePath(
        omega.grid, omega.values + (c - path_average(omega)) * g
    )


def pin_average_parabola(p: SamplePath, c: float) -> SamplePath:
    """Drive the path's average to ``c`` by a parabola-profile correction
    ``6 t (1 - t) (c - average)``; preserves the endpoint values."""
    t = p.grid.points
    prof = 6.0 * t * (1.0 - t)
    return SamplePath(p.grid, p.values + (c - path_average(p)) * prof)


# ---------------------------------------------------------------------------
# glued-path proposals
# ---------------------------------------------------------------------------

def excursion_proposal(
    m: SamplePath, m_hat: SamplePath, c: float, rs: RandomSource
) -> SamplePath:
    """Assemble the average-``c`` excursion proposal from two meander paths.

    The outer thirds are the meanders run inward from each endpoint (time
    sped up by 3, values scaled by 1/sqrt(3)); the middle third is a Brownian
    bridge between the scaled meander endpoints, sampled from ``rs``; finally
    the average is pinned to ``c`` by the middle-supported correction.
    """
    if c < 0:
        raise ValueError("the proposal target average must be nonnegative")
    if m.grid != m_hat.grid:
        raise ValueError("the two meander paths must share one grid")
    if m.grid.t_start != 0.0 or m.grid.t_end != 1.0:
        raise ValueError("meander paths must live on [0, 1]")
    n_m = m.grid.n_points
    n_full = 3 * (n_m - 1) + 1
    grid = TimeGrid.unit(n_full)
    s3 = math.sqrt(3.0)
    mid_grid = TimeGrid(1.0 / 3.0, 2.0 / 3.0, n_m)
    mid = _bridge_rows(
        mid_grid,
        m.values[-1] / s3,
        m_hat.values[-1] / s3,
        rs.generator(),
        1,
    )[0]
    vals = np.empty(n_full)
    vals[: n_m] = m.values / s3
    vals[n_m - 1 : 2 * n_m - 1] = mid
    vals[2 * (n_m - 1) :] = m_hat.values[::-1] / s3
    return pin_average_middle(SamplePath(grid, vals), c)


def meander_proposal(m: SamplePath, b: SamplePath, c: float) -> SamplePath:
    """Assemble the average-``c`` meander proposal from a meander path and a
    Brownian path on [0, 1/2].

    The first half is the meander run at double speed scaled by 1/sqrt(2);
    the second half continues from its endpoint by the Brownian path; the
    average is pinned to ``c`` by a correction supported on [1/2, 1] that
    vanishes at the junction.
    """
    if c < 0:
        raise ValueError("the proposal target average must be nonnegative")
    if m.grid.t_start != 0.0 or m.grid.t_end != 1.0:
        raise ValueError("the meander path must live on [0, 1]")
    n_m = m.grid.n_points
    if b.grid != TimeGrid(0.0, 0.5, n_m):
        raise ValueError(
            "the Brownian path must live on [0, 1/2] with the same point "
            "count as the meander"
        )
    n_full = 2 * (n_m - 1) + 1
    grid = TimeGrid.unit(n_full)
    s2 = math.sqrt(2.0)
    vals = np.empty(n_full)
    vals[: n_m] = m.values / s2
    vals[n_m - 1 :] = m.values[-1] / s2 + b.values
    u = SamplePath(grid, vals)
    g = _meander_pin_profile(grid)
    return SamplePath(grid, u.values + (c - path_average(u)) * g)


# ---------------------------------------------------------------------------
# importance weights of the glued proposals
# ---------------------------------------------------------------------------

def _excursion_weight_rows(values: np.ndarray, grid: TimeGrid, c: float):
    stat = values @ _excursion_average_vector(grid)
    gap = values @ (
        _point_eval_vector(grid, 2.0 / 3.0) - _point_eval_vector(grid, 1.0 / 3.0)
    )
    return np.exp(-162.0 * (stat - c) ** 2 - 1.5 * gap**2)

def excursion_proposal_weight(omega: SamplePath, c: float) -> float:
    """Importance weight of the excursion proposal against the conditioned
    excursion (normalization folded into the density constant); in (0, 1]."""
    return float(_excursion_weight_rows(omega.values[None, :], omega.grid, c)[0])


def middle_pin_weight(omega: SamplePath, c: float) -> float:
    """Weight relating the average-pinned bridge to the middle-pinned
    construction: ``sqrt(27) exp(-162 (stat - c)^2 + 6 c^2)``."""
    stat = float(omega.values @ _excursion_average_vector(omega.grid))
    return math.sqrt(27.0) * math.exp(-162.0 * (stat - c) ** 2 + 6.0 * c**2)


def bridge_gluing_weight(omega: SamplePath) -> float:
    """Weight restoring the bridge law after a free middle regluing:
    ``sqrt(3) exp(-(3/2) (ω(2/3) - ω(1/3))^2)``; in (0, sqrt(3)]."""
    gap = omega.value_at(2.0 / 3.0) - omega.value_at(1.0 / 3.0)
    return math.sqrt(3.0) * math.exp(-1.5 * gap**2)


def _meander_weight_rows(values: np.ndarray, grid: TimeGrid, c: float):
    stat = values @ _meander_average_vector(grid)
    return np.exp(-12.0 * (stat - c) ** 2)

def meander_proposal_weight(omega: SamplePath, c: float) -> float:
    """Importance weight of the meander proposal against the conditioned
    meander (normalization folded into the density constant); in (0, 1]."""
    return float(_meander_weight_rows(omega.values[None, :], omega.grid, c)[0])


def gaussian_shift_identity(sigma: float, c: float) -> float:
    """Closed form of the Gaussian average of a shifted squared-exponential:
    for x ~ N(0, sigma^2), E[exp(-(x - c)^2 / 2)] equals
    ``(1 + sigma^2)^{-1/2} exp(-c^2 / (2 (1 + sigma^2)))``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    s2 = 1.0 + sigma**2
    return math.exp(-(c**2) / (2.0 * s2)) / math.sqrt(s2)


# ---------------------------------------------------------------------------
# Monte Carlo estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityEstimate:
    """One density evaluation: value ± std_error from n_samples draws."""

    c: float
    value: float
    std_error: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.value < 0 or self.std_error < 0:
            raise ValueError("density estimate and its error must be nonnegative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


@dataclass
class WeightedEnsemble:
    """Proposal paths (rows) with their nonnegative importance weights.

    Materializes every path: intended for moderate sizes (demos, diagnostic
    ensembles); the streaming estimators below never build this.
    """

    grid: TimeGrid
    paths: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.paths = np.asarray(self.paths, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.paths.ndim != 2 or self.paths.shape[1] != self.grid.n_points:
            raise ValueError("paths must be rows over the grid")
        if self.weights.shape != (self.paths.shape[0],):
            raise ValueError("one weight per path required")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")

    def expectation(self, phi) -> tuple[float, float]:
        """Self-normalized weighted mean of ``phi(paths, grid)`` with its
        delta-method standard error."""
        f = np.asarray(phi(self.paths, self.grid), dtype=float)
        return _ratio_estimate(self.weights, f)


def _ratio_estimate(w: np.ndarray, f: np.ndarray) -> tuple[float, float]:
    total = float(w.sum())
    if total <= 0.0:
        raise RuntimeError("all importance weights are zero")
    r = float((w * f).sum() / total)
    resid = w * (f - r)
    n = w.size
    se = math.sqrt(float(resid @ resid) * n / (n - 1)) / total if n > 1 else 0.0
    return r, se


def _excursion_piece_points(grid_points: int) -> int:
    if (grid_points - 1) % 3 != 0 or grid_points < 7:
        raise ValueError(
            "excursion proposals need a grid with 3k+1 points, k >= 2"
        )
    return (grid_points - 1) // 3 + 1


def _meander_piece_points(grid_points: int) -> int:
    if (grid_points - 1) % 2 != 0 or grid_points < 5:
        raise ValueError(
            "meander proposals need a grid with 2k+1 points, k >= 2"
        )
    return (grid_points - 1) // 2 + 1


def _excursion_rows(rs: RandomSource, size: int, grid_points: int):
    """Glued (un-pinned) excursion-proposal rows plus their average."""
    n_m = _excursion_piece_points(grid_points)
    sub = TimeGrid.unit(n_m)
    mid_grid = TimeGrid(1.0 / 3.0, 2.0 / 3.0, n_m)
    s3 = math.sqrt(3.0)
    m1 = _meander_rows(sub, rs.child(0).generator(), size)
    m2 = _meander_rows(sub, rs.child(1).generator(), size)
    mid = _bridge_rows(
        mid_grid, m1[:, -1] / s3, m2[:, -1] / s3, rs.child(2).generator(), size
    )
    rows = np.empty((size, grid_points))
    rows[:, :n_m] = m1 / s3
    rows[:, n_m - 1 : 2 * n_m - 1] = mid
    rows[:, 2 * (n_m - 1) :] = m2[:, ::-1] / s3
    return rows


def _meander_rows_glued(rs: RandomSource, size: int, grid_points: int):
    """Glued (un-pinned) meander-proposal rows."""
    n_m = _meander_piece_points(grid_points)
    sub = TimeGrid.unit(n_m)
    half = TimeGrid(0.0, 0.5, n_m)
    s2 = math.sqrt(2.0)
    m = _meander_rows(sub, rs.child(0).generator(), size)
    b = _bm_rows(half, rs.child(1).generator(), size)
    rows = np.empty((size, grid_points))
    rows[:, :n_m] = m / s2
    rows[:, n_m - 1 :] = m[:, -1:] / s2 + b
    return rows


def _dip_threshold(
    rows: np.ndarray,
    g: np.ndarray,
    spacing: float,
    lo: int,
    hi: int,
    gen: np.random.Generator,
) -> np.ndarray:
    """Per-path shift threshold above which the pinned path stays nonnegative
    on the whole continuum interval, not only at the nodes.

    The pinned path is ``rows + g s`` (``s`` the shift, ``g >= 0`` supported
    on columns ``lo..hi``); between nodes it is locally Brownian there, so
    each cell's minimum given the nodal values ``a, b`` can be sampled
    exactly: it is nonnegative iff ``a + b >= 0`` and ``a b >= G`` with
    ``G = (spacing / 2) * Exp(1)``.  Both conditions are monotone in ``s``
    (meeting them once, larger shifts keep them), so each cell contributes a
    threshold — the larger root of ``(a0 + g0 s)(a1 + g1 s) = G`` — and the
    path is feasible iff ``s`` clears them all.  Sampling the minima keeps
    the positivity indicator free of the O(sqrt(spacing)) bias that checking
    nodes alone would leave, while staying a per-path scalar shared by every
    target average.  Outside ``lo..hi`` the glued pieces are nonnegative by
    construction and unaffected by the shift.
    """
    a0 = rows[:, lo:hi]
    a1 = rows[:, lo + 1 : hi + 1]
    g0 = g[lo:hi][None, :]
    g1 = g[lo + 1 : hi + 1][None, :]
    big_g = 0.5 * spacing * gen.exponential(size=a0.shape)
    # cell quadratic A s^2 + B s + C >= 0 with A >= 0
    quad_a = g0 * g1
    quad_b = a0 * g1 + a1 * g0
    quad_c = a0 * a1 - big_g
    disc = quad_b**2 - 4.0 * quad_a * quad_c
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        # larger root, in the cancellation-free form on each branch
        # (also exact in the linear limit quad_a -> 0 when quad_b > 0)
        root = np.where(
            quad_b > 0.0,
            -2.0 * quad_c / (quad_b + sqrt_disc),
            (-quad_b + sqrt_disc) / (2.0 * quad_a),
        )
    thr = np.where(disc >= 0.0, root, -np.inf)
    thr = np.where(np.isnan(thr), np.inf, thr)  # degenerate cells: infeasible
    lin_floor = -(a0 + a1) / (g0 + g1)
    return np.maximum(thr, lin_floor).max(axis=1)


def _excursion_positivity_floor(
    rows: np.ndarray, avg: np.ndarray, grid: TimeGrid, rs: RandomSource
) -> np.ndarray:
    """Smallest target average keeping a glued excursion proposal nonnegative
    (continuum-exact via sampled cell minima on the middle third)."""
    i1 = grid.index_of(1.0 / 3.0)
    i2 = grid.index_of(2.0 / 3.0)
    thr = _dip_threshold(
        rows, _excursion_pin_profile_discrete(grid), grid.spacing, i1, i2,
        rs.child(3).generator(),
    )
    return avg + thr


def _meander_positivity_floor(
    rows: np.ndarray, avg: np.ndarray, grid: TimeGrid, rs: RandomSource
) -> np.ndarray:
    """Smallest target average keeping a glued meander proposal nonnegative
    (continuum-exact via sampled cell minima on the second half)."""
    ih = grid.index_of(0.5)
    thr = _dip_threshold(
        rows, _meander_pin_profile_discrete(grid), grid.spacing, ih,
        grid.n_points - 1, rs.child(3).generator(),
    )
    return avg + thr


def _excursion_scalars(rs: RandomSource, size: int, grid_points: int):
    grid = TimeGrid.unit(grid_points)
    rows = _excursion_rows(rs, size, grid_points)
    avg = rows @ grid.quad_weights
    stat = rows @ _excursion_average_vector(grid)
    i1 = grid.index_of(1.0 / 3.0)
    i2 = grid.index_of(2.0 / 3.0)
    gap = rows[:, i2] - rows[:, i1]
    c_min = _excursion_positivity_floor(rows, avg, grid, rs)
    return stat, gap, c_min


def _meander_scalars(rs: RandomSource, size: int, grid_points: int):
    grid = TimeGrid.unit(grid_points)
    rows = _meander_rows_glued(rs, size, grid_points)
    avg = rows @ grid.quad_weights
    stat = rows @ _meander_average_vector(grid)
    c_min = _meander_positivity_floor(rows, avg, grid, rs)
    return stat, c_min


# The un-pinned statistics above serve every c at once: the pinning
# correction is supported strictly inside the region where the pinned
# statistic places no mass and vanishes at the junction points it reads,
# so the statistic (and the junction gap) of the pinned path equal those
# of the glued path for every target c.

def density_curve_excursion(
    c_values,
    n_samples: int,
    rs: RandomSource,
    grid_points: int = DEFAULT_GRID_POINTS,
    chunk_size: int = _mc.DEFAULT_CHUNK,
    threads: int = 1,
) -> list[DensityEstimate]:
    """Density of the excursion's time average on a grid of c values, from
    one shared proposal ensemble (common random numbers across c)."""
    _excursion_piece_points(grid_points)
    stat, gap, c_min = _mc.map_chunks(
        lambda r, m: _excursion_scalars(r, m, grid_points),
        n_samples, rs, chunk_size=chunk_size, threads=threads,
    )
    out = []
    base = np.exp(-1.5 * gap**2)
    for c in np.atleast_1d(np.asarray(c_values, dtype=float)):
        if c < 0:
            raise ValueError("the average must be nonnegative")
        w = np.exp(-162.0 * (stat - c) ** 2) * base * (c >= c_min)
        mean, se = _mc.mean_and_se(w)
        out.append(
            DensityEstimate(
                c=float(c),
                value=EXCURSION_DENSITY_CONST * mean,
                std_error=EXCURSION_DENSITY_CONST * se,
                n_samples=n_samples,
            )
        )
    return out


def density_curve_meander(
    c_values,
    n_samples: int,
    rs: RandomSource,
    grid_points: int = DEFAULT_GRID_POINTS,
    chunk_size: int = _mc.DEFAULT_CHUNK,
    threads: int = 1,
) -> list[DensityEstimate]:
    """Density of the meander's time average on a grid of c values, from one
    shared proposal ensemble (common random numbers across c)."""
    _meander_piece_points(grid_points)
    stat, c_min = _mc.map_chunks(
        lambda r, m: _meander_scalars(r, m, grid_points),
        n_samples, rs, chunk_size=chunk_size, threads=threads,
    )
    out = []
    for c in np.atleast_1d(np.asarray(c_values, dtype=float)):
        if c < 0:
            raise ValueError("the average must be nonnegative")
        w = np.exp(-12.0 * (stat - c) ** 2) * (c >= c_min)
        mean, se = _mc.mean_and_se(w)
        out.append(
            DensityEstimate(
                c=float(c),
                value=MEANDER_DENSITY_CONST * mean,
                std_error=MEANDER_DENSITY_CONST * se,
                n_samples=n_samples,
            )
        )
    return out


def estimate_density_excursion(
    c: float,
    n_samples: int,
    rs: RandomSource,
    grid_points: int = DEFAULT_GRID_POINTS,
    chunk_size: int = _mc.DEFAULT_CHUNK,
    threads: int = 1,
) -> DensityEstimate:
    """Monte Carlo density of the excursion's time average at ``c``:
    the normalizing constant times the mean proposal weight with the
    grid-point nonnegativity indicator."""
    return density_curve_excursion(
        [c], n_samples, rs, grid_points, chunk_size, threads
    )[0]


def estimate_density_meander(
    c: float,
    n_samples: int,
    rs: RandomSource,
    grid_points: int = DEFAULT_GRID_POINTS,
    chunk_size: int = _mc.DEFAULT_CHUNK,
    threads: int = 1,
) -> DensityEstimate:
    """Monte Carlo density of the meander's time average at ``c``."""
    return density_curve_meander(
        [c], n_samples, rs, grid_points, chunk_size, threads
    )[0]


def excursion_weighted_ensemble(
    c: float,
    n_samples: int,
    rs: RandomSource,
    grid_points: int = DEFAULT_GRID_POINTS,
) -> WeightedEnsemble:
    """Materialize average-``c`` excursion proposals with their weights
    (zero where the continuum path would dip negative, judged by sampled
    cell minima, not nodes alone).  Memory scales as
    ``n_samples × grid_points``; use the streaming estimators for large runs.
    """
    if c < 0:
        raise ValueError("the average must be nonnegative")
    grid = TimeGrid.unit(grid_points)
    rows = _excursion_rows(rs, n_samples, grid_points)
    avg = rows @ grid.quad_weights
    c_floor = _excursion_positivity_floor(rows, avg, grid, rs)
    g = _excursion_pin_profile_discrete(grid)
    rows += np.multiply.outer(c - avg, g)
    w = _excursion_weight_rows(rows, grid, c)
    w[c < c_floor] = 0.0
    return WeightedEnsemble(grid, rows, w)


def meander_weighted_ensemble(
    c: float,
    n_samples: int,
    rs: RandomSource,
    grid_points: int = DEFAULT_GRID_POINTS,
) -> WeightedEnsemble:
    """Materialize average-``c`` meander proposals with their weights
    (zero where the continuum path would dip negative, judged by sampled
    cell minima on the second half, not nodes alone)."""
    if c < 0:
        raise ValueError("the average must be nonnegative")
    grid = TimeGrid.unit(grid_points)
    rows = _meander_rows_glued(rs, n_samples, grid_points)
    avg = rows @ grid.quad_weights
    c_floor = _meander_positivity_floor(rows, avg, grid, rs)
    g = _meander_pin_profile_discrete(grid)
    rows += np.multiply.outer(c - avg, g)
    w = _meander_weight_rows(rows, grid, c)
    w[c < c_floor] = 0.0
    return WeightedEnsemble(grid, rows, w)


def glued_bridge_rows(
    rs: RandomSource, size: int, grid_points: int
) -> np.ndarray:
    """Rows of the three-piece glued process built from plain Brownian
    motion: independent motions run inward from each endpoint over the outer
    thirds, joined by a conditionally independent bridge across the middle.

    Reweighting this law by ``bridge_gluing_weight`` recovers the standard
    bridge on [0, 1]; the unit test of that identity is the law-level check
    of the gluing construction that the positive proposals reuse.
    """
    n_m = _excursion_piece_points(grid_points)
    sub = TimeGrid.unit(n_m)
    mid_grid = TimeGrid(1.0 / 3.0, 2.0 / 3.0, n_m)
    s3 = math.sqrt(3.0)
    b1 = _bm_rows(sub, rs.child(0).generator(), size)
    b2 = _bm_rows(sub, rs.child(1).generator(), size)
    mid = _bridge_rows(
        mid_grid, b1[:, -1] / s3, b2[:, -1] / s3, rs.child(2).generator(), size
    )
    rows = np.empty((size, grid_points))
    rows[:, :n_m] = b1 / s3
    rows[:, n_m - 1 : 2 * n_m - 1] = mid
    rows[:, 2 * (n_m - 1) :] = b2[:, ::-1] / s3
    return rows


def conditional_expectation(
    phi,
    c: float,
    n_samples: int,
    rs: RandomSource,
    kind: str = "excursion",
    grid_points: int = DEFAULT_GRID_POINTS,
    chunk_size: int = _mc.DEFAULT_CHUNK,
    threads: int = 1,
) -> tuple[float, float]:
    """Self-normalized estimate of E[phi | time average = c] under the
    excursion (or meander) law, with delta-method standard error.

    ``phi(values, grid)`` must map a batch of path rows to one real per row.
    Raises if every weight vanishes (reporting ``c`` and ``n_samples``).
    """
    if c <= 0:
        raise ValueError("conditional expectations need a positive average")
    if kind == "excursion":
        builder, weigher, profile, floor = (
            _excursion_rows, _excursion_weight_rows,
            _excursion_pin_profile_discrete, _excursion_positivity_floor,
        )
    elif kind == "meander":
        builder, weigher, profile, floor = (
            _meander_rows_glued, _meander_weight_rows,
            _meander_pin_profile_discrete, _meander_positivity_floor,
        )
    else:
        raise ValueError(f"unknown kind {kind!r}")
    grid = TimeGrid.unit(grid_points)
    g = profile(grid)

    def one_chunk(r: RandomSource, m: int):
        rows = builder(r, m, grid_points)
        avg = rows @ grid.quad_weights
        c_floor = floor(rows, avg, grid, r)
        rows += np.multiply.outer(c - avg, g)
        w = weigher(rows, grid, c)
        w = np.where(c >= c_floor, w, 0.0)
        f = np.asarray(phi(rows, grid), dtype=float)
        if f.shape != (m,):
            raise ValueError("phi must return one value per path row")
        return w, f

    w, f = _mc.map_chunks(
        one_chunk, n_samples, rs, chunk_size=chunk_size, threads=threads
    )
    try:
        return _ratio_estimate(w, f)
    except RuntimeError:
        raise RuntimeError(
            f"degenerate conditional expectation: all {n_samples} importance "
            f"weights vanished at c={c}"
        ) from None
