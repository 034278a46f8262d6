"""Conservative fourth-order stochastic integrator with soft reflection.

The field u lives on a uniform grid over [0, 1], pinned to 0 at both ends.
Its interior evolves by

    du = -N (D u - penalty(u)) dt + (conservative noise),

where ``D`` is the pinned-boundary second-difference matrix, ``N`` the
zero-flux one, and ``penalty(u) = (u + alpha)^- / epsilon`` softly pushes the
field above ``-alpha``.  The scheme is semi-implicit: the stiff fourth-order
drift is solved implicitly through the deflated eigenbasis of
:func:`exlab.operators.flow_basis`, the penalty explicitly.

Noise: per step the increment is drawn from the exact stochastic convolution
of the linear flow over one dt — mode k receives variance
``(1 - exp(-2 rate_k dt)) / h`` and the conserved mode receives exactly zero.
A plain face-divergence increment would distort the stationary variance of
every mode with rate·dt ≳ 1, which at the default resolution is a ~25%
pointwise deficit; the convolution form keeps the stationary law correct for
all dt while remaining driven by a genuine Brownian sheet.  Conservation of
the average is exact to machine precision by the basis construction.

Explicit-penalty stability: linearizing the penalty gives the constraint
``dt <= 8 epsilon^2`` (the penalty slope 1/epsilon against the implicit
damping); configs violating it are flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from exlab.operators import FlowBasis, flow_basis
from exlab.path_core import RandomSource, SamplePath, TimeGrid, path_average

DEFAULT_GRID_POINTS = 129
DEFAULT_DT = 1e-5
DEFAULT_T_END = 2.0


# ---------------------------------------------------------------------------
# configuration, state, trajectory log
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpdeConfig:
    """Integrator parameters.

    ``epsilon=None`` selects the linear flow (no penalty).  ``seed`` is
    bookkeeping for serialization; the integrator takes its RandomSource
    explicitly.  ``snapshot_times=None`` means 9 evenly spaced snapshots.
    ``eta_window_delta`` sets the compact window [delta, 1-delta] in space
    and [delta, .] in time on which reflection mass is reported separately.
    ``occupation_thresholds`` request the fraction of (time, node) samples
    with u below each threshold, counted from ``occupation_burn_in`` on and
    restricted to the compact window [delta, 1-delta] (the same window as the
    reflection-mass and contact records; the pinned endpoints carry
    unsuppressible boundary layers).
    """

    epsilon: float | None = None
    alpha: float = 0.0
    c: float = 1.0
    grid: TimeGrid = TimeGrid.unit(DEFAULT_GRID_POINTS)
    dt: float = DEFAULT_DT
    t_end: float = DEFAULT_T_END
    seed: int | None = None
    snapshot_times: tuple | None = None
    eta_window_delta: float = 0.05
    record_weak_data: bool = False
    occupation_thresholds: tuple = ()
    occupation_burn_in: float = 1.0

    def __post_init__(self) -> None:
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive (or None for linear)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.c < 0:
            raise ValueError("c must be nonnegative")
        if self.grid.t_start != 0.0 or self.grid.t_end != 1.0:
            raise ValueError("the field lives on [0, 1]")
        if self.grid.n_points < 6:
            raise ValueError("grid too coarse for the fourth-order flow")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")

    @property
    def is_linear(self) -> bool:
        return self.epsilon is None or math.isinf(self.epsilon)

    @property
    def penalty_stable(self) -> bool:
        """Whether the explicit penalty satisfies dt <= 8 epsilon^2."""
        if self.is_linear:
            return True
        return self.dt <= 8.0 * self.epsilon**2

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def resolved_snapshot_times(self) -> tuple:
        if self.snapshot_times is not None:
            return tuple(float(t) for t in self.snapshot_times)
        return tuple(np.linspace(0.0, self.t_end, 9))


@dataclass
class SpdeState:
    """Field state plus the running reflection bookkeeping.

    ``eta_accum`` holds the accumulated reflection mass per grid cell
    (trapezoid cell widths); ``contact_accum`` the accumulated ∫ u dη paired
    against the compact spatial window [delta, 1-delta], which the reflection
    limit drives to zero.  (The pinned endpoints carry a boundary layer of
    width ~sqrt(epsilon) where the field is negative roughly half the time
    and no penalty strength can suppress it; the limit object is a measure on
    the open interval, so the contact pairing must exclude the endpoints.)
    """

    u: SamplePath
    time: float = 0.0
    eta_accum: np.ndarray = None
    contact_accum: float = 0.0
    step_index: int = 0

    def __post_init__(self) -> None:
        if self.eta_accum is None:
            self.eta_accum = np.zeros(self.u.grid.n_points)
        self.eta_accum = np.asarray(self.eta_accum, dtype=float)
        if self.eta_accum.shape != (self.u.grid.n_points,):
            raise ValueError("eta_accum must have one cell per grid point")
        if np.any(self.eta_accum < 0):
            raise ValueError("accumulated reflection mass must be nonnegative")


@dataclass
class TrajectoryLog:
    """Snapshots and running statistics of one trajectory.

    All series are parallel to ``times``.  ``eta_compact_mass`` is the
    reflection mass accumulated inside the compact window; ``contact`` the
    accumulated ∫ u dη from time 0.  When weak-form data is recorded, the
    cumulative left-Riemann field/penalty integrals and the cumulative noise
    (interior vectors) are stored per snapshot so any admissible test
    function can be evaluated afterwards.
    """

    grid: TimeGrid
    dt: float
    eta_window_delta: float
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    averages: list = field(default_factory=list)
    min_values: list = field(default_factory=list)
    eta_compact_mass: list = field(default_factory=list)
    contact: list = field(default_factory=list)
    cum_field: list | None = None
    cum_penalty: list | None = None
    cum_noise: list | None = None
    occupation_fractions: dict | None = None

    def snapshot_index(self, t: float) -> int:
        for i, s in enumerate(self.times):
            if abs(s - t) <= 1e-9:
                return i
        raise ValueError(f"no snapshot at time {t}; have {self.times}")


# ---------------------------------------------------------------------------
# penalty and workspace
# ---------------------------------------------------------------------------

def penalty(u: SamplePath, epsilon: float, alpha: float) -> SamplePath:
    """Soft-reflection force ``max(-(u + alpha), 0) / epsilon`` (pointwise)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return SamplePath(u.grid, np.maximum(-(u.values + alpha), 0.0) / epsilon)


def _penalty_rows(values: np.ndarray, epsilon: float, alpha: float) -> np.ndarray:
    return np.maximum(-(values + alpha), 0.0) / epsilon


@dataclass(frozen=True)
class _Workspace:
    basis: FlowBasis
    dt: float
    minv: np.ndarray = field(repr=False)        # (I + dt N D)^{-1}, interior
    noise_factor: np.ndarray = field(repr=False)  # modes x per-mode std


@lru_cache(maxsize=8)
def _workspace(n_points: int, dt: float) -> _Workspace:
    basis = flow_basis(n_points)
    shrink = 1.0 / (1.0 + dt * basis.rates)
    minv = (basis.modes * shrink) @ basis.modes_inv
    mode_std = np.sqrt((1.0 - np.exp(-2.0 * dt * basis.rates)) / basis.h)
    mode_std[0] = 0.0  # the conserved mode receives no noise, exactly
    noise_factor = basis.modes * mode_std
    return _Workspace(basis=basis, dt=dt, minv=minv, noise_factor=noise_factor)


def _neumann_apply(ws: _Workspace, cols: np.ndarray) -> np.ndarray:
    """Zero-flux second-difference on interior columns (tridiagonal, cheap)."""
    h2 = ws.basis.h ** 2
    out = np.empty_like(cols)
    out[0] = (cols[0] - cols[1]) / h2
    out[1:-1] = (2.0 * cols[1:-1] - cols[:-2] - cols[2:]) / h2
    out[-1] = (cols[-1] - cols[-2]) / h2
    return out


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def step(state: SpdeState, config: SpdeConfig, rs: RandomSource) -> SpdeState:
    """One semi-implicit step; deterministic given (state.step_index, rs).

    Accumulates reflection mass and contact integral from the pre-step field,
    then advances: implicit linear flow on (field + dt × zero-flux response
    of the penalty), plus the exact-convolution noise increment.
    """
    grid = config.grid
    if state.u.grid != grid:
        raise ValueError("state grid does not match config grid")
    ws = _workspace(grid.n_points, config.dt)
    dt = config.dt
    u_old = state.u.values
    u_int = u_old[1:-1]

    if config.is_linear:
        p_full = np.zeros(grid.n_points)
        rhs = u_int
    else:
        p_full = _penalty_rows(u_old, config.epsilon, config.alpha)
        rhs = u_int + dt * _neumann_apply(ws, p_full[1:-1, None])[:, 0]

    gen = rs.shifted(state.step_index).generator()
    z = gen.standard_normal(grid.n_points - 2)
    u_new_int = ws.minv @ rhs + ws.noise_factor @ z
    if not np.all(np.isfinite(u_new_int)):
        raise RuntimeError(
            f"field blew up at time {state.time:.6g} with dt={dt:.3g} "
            f"(penalty stability requires dt <= 8 epsilon^2)"
        )
    u_new = np.zeros(grid.n_points)
    u_new[1:-1] = u_new_int

    eta_inc = p_full * grid.quad_weights * dt
    delta = config.eta_window_delta
    theta = grid.points
    window = (theta >= delta) & (theta <= 1.0 - delta)
    contact_inc = float((window * u_old * p_full) @ grid.quad_weights) * dt
    return SpdeState(
        u=SamplePath(grid, u_new),
        time=(state.step_index + 1) * dt,
        eta_accum=state.eta_accum + eta_inc,
        contact_accum=state.contact_accum + contact_inc,
        step_index=state.step_index + 1,
    )


def initial_profile(config: SpdeConfig) -> SamplePath:
    """The stationary mean start: c × the discretely normalized parabola
    profile (zero at the ends, trapezoid average exactly c)."""
    t = config.grid.points
    prof = 6.0 * t * (1.0 - t)
    prof = prof / float(prof @ config.grid.quad_weights)
    return SamplePath(config.grid, config.c * prof)


def run(x0: SamplePath, config: SpdeConfig, rs: RandomSource) -> TrajectoryLog:
    """Integrate from ``x0`` to t_end, logging at the snapshot times.

    ``x0`` must vanish at both ends and have trapezoid average c (1e-8).
    Snapshot times are snapped to whole steps; the logged times are the
    actual step times.
    """
    grid = config.grid
    if x0.grid != grid:
        raise ValueError("x0 grid does not match config grid")
    if x0.values[0] != 0.0 or x0.values[-1] != 0.0:
        raise ValueError("x0 must vanish at both boundary points")
    if abs(path_average(x0) - config.c) > 1e-8:
        raise ValueError(
            f"x0 average {path_average(x0)!r} does not match c={config.c!r}"
        )
    dt = config.dt
    n_steps = config.n_steps
    snap_steps = sorted(
        {min(max(int(round(t / dt)), 0), n_steps)
         for t in config.resolved_snapshot_times()}
    )
    record_weak = config.record_weak_data
    n_int = grid.n_points - 2

    log = TrajectoryLog(grid=grid, dt=dt, eta_window_delta=config.eta_window_delta)
    if record_weak:
        log.cum_field, log.cum_penalty, log.cum_noise = [], [], []
    delta = config.eta_window_delta
    theta = grid.points
    window = (theta >= delta) & (theta <= 1.0 - delta)
    eta_compact = 0.0

    cum_field = np.zeros(n_int)
    cum_penalty = np.zeros(n_int)
    cum_noise = np.zeros(n_int)
    occ_counts = np.zeros(len(config.occupation_thresholds), dtype=np.int64)
    occ_total = 0
    n_window = int(window.sum())

    ws = _workspace(grid.n_points, dt)
    state = SpdeState(u=SamplePath(grid, x0.values.copy()))

    def log_snapshot(s: SpdeState) -> None:
        log.times.append(s.time)
        log.snapshots.append(s.u.values.copy())
        log.averages.append(path_average(s.u))
        log.min_values.append(float(s.u.values.min()))
        log.eta_compact_mass.append(eta_compact)
        log.contact.append(s.contact_accum)
        if record_weak:
            log.cum_field.append(cum_field.copy())
            log.cum_penalty.append(cum_penalty.copy())
            log.cum_noise.append(cum_noise.copy())

    if snap_steps and snap_steps[0] == 0:
        log_snapshot(state)
        snap_steps = snap_steps[1:]

    for k in range(n_steps):
        u_old = state.u.values
        if record_weak:
            cum_field += u_old[1:-1] * dt
        if not config.is_linear:
            p_full = _penalty_rows(u_old, config.epsilon, config.alpha)
            if record_weak:
                cum_penalty += p_full[1:-1] * dt
            if window.any() and state.time >= delta:
                eta_compact += float(
                    (p_full[window] * grid.quad_weights[window]).sum()
                ) * dt
        if record_weak:
            before = state.u.values[1:-1].copy()
        new_state = step(state, config, rs)
        if record_weak:
            # noise increment = new - implicit drift part, reconstructed
            if config.is_linear:
                drift = ws.minv @ before
            else:
                drift = ws.minv @ (
                    before
                    + dt * _neumann_apply(ws, p_full[1:-1, None])[:, 0]
                )
            cum_noise += new_state.u.values[1:-1] - drift
        state = new_state
        if config.occupation_thresholds and state.time >= config.occupation_burn_in:
            ui = state.u.values[window]
            for j, thr in enumerate(config.occupation_thresholds):
                occ_counts[j] += int((ui < thr).sum())
            occ_total += n_window
        if snap_steps and k + 1 == snap_steps[0]:
            log_snapshot(state)
            snap_steps = snap_steps[1:]

    if config.occupation_thresholds:
        log.occupation_fractions = {
            float(thr): (occ_counts[j] / occ_total if occ_total else float("nan"))
            for j, thr in enumerate(config.occupation_thresholds)
        }
    return log


def run_batch_final(
    x0_rows: np.ndarray, config: SpdeConfig, rs: RandomSource
) -> np.ndarray:
    """Evolve many trajectories (rows) to t_end and return the final rows.

    One generator drives all columns: deterministic for fixed (config, rs)
    and independent of any outer threading.  No logging, minimal memory.
    """
    grid = config.grid
    rows = np.asarray(x0_rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != grid.n_points:
        raise ValueError("x0_rows must be trajectories over the config grid")
    ws = _workspace(grid.n_points, config.dt)
    dt = config.dt
    u = rows[:, 1:-1].T.copy()  # interior, one column per trajectory
    gen = rs.generator()
    n_int, m = u.shape
    for _ in range(config.n_steps):
        if config.is_linear:
            rhs = u
        else:
            p = _penalty_rows(u, config.epsilon, config.alpha)
            rhs = u + dt * _neumann_apply(ws, p)
        z = gen.standard_normal((n_int, m))
        u = ws.minv @ rhs + ws.noise_factor @ z
    out = np.zeros_like(rows)
    out[:, 1:-1] = u.T
    return out


# ---------------------------------------------------------------------------
# weak-form diagnostic
# ---------------------------------------------------------------------------

def _check_admissible(h: SamplePath) -> None:
    """Test functions must have flat first and second derivatives at both
    ends (to grid tolerance): the weak form moves four derivatives onto h."""
    v = h.values
    d = h.grid.spacing
    d1 = np.diff(v) / d
    d2 = np.diff(v, 2) / d**2
    scale1 = float(np.max(np.abs(d1))) or 1.0
    scale2 = float(np.max(np.abs(d2))) or 1.0
    tol1 = 10.0 * d * scale1
    tol2 = 10.0 * d * scale2
    bad = []
    if abs(d1[0]) > tol1 or abs(d1[-1]) > tol1:
        bad.append("first derivative not flat at an endpoint")
    if abs(d2[0]) > tol2 or abs(d2[-1]) > tol2:
        bad.append("second derivative not flat at an endpoint")
    if bad:
        raise ValueError("inadmissible test function: " + "; ".join(bad))


def weak_form_residual(
    log: TrajectoryLog, h: SamplePath, delta: float, t: float
) -> float:
    """|weak-form residual| of the recorded trajectory over [delta, t].

    The residual pairs the field increment with h, adds the time integral of
    the field against the flow response of h, subtracts the penalty term
    against the zero-flux response, and subtracts the recorded noise:

        <u(t) - u(delta), h> + ∫<u, D N h> - ∫<p, N h> - <noise, h>.

    Time integrals are the recorded left-Riemann sums, so for generic h the
    residual is O(dt); for h constant it telescopes to exact conservation.
    Requires weak-form recording and snapshots at both times.
    """
    if log.cum_field is None:
        raise ValueError("trajectory was not recorded with weak-form data")
    if h.grid != log.grid:
        raise ValueError("test function grid does not match the trajectory")
    if not (delta < t):
        raise ValueError("need delta < t")
    _check_admissible(h)
    i0 = log.snapshot_index(delta)
    i1 = log.snapshot_index(t)
    basis = flow_basis(log.grid.n_points)
    hw = basis.h
    h_int = h.values[1:-1]
    n_h = basis.neumann @ h_int
    dn_h = basis.dirichlet @ n_h

    du = (log.snapshots[i1] - log.snapshots[i0])[1:-1]
    int_u = log.cum_field[i1] - log.cum_field[i0]
    int_p = log.cum_penalty[i1] - log.cum_penalty[i0]
    d_noise = log.cum_noise[i1] - log.cum_noise[i0]
    residual = hw * (
        float(du @ h_int)
        + float(int_u @ dn_h)
        - float(int_p @ n_h)
        - float(d_noise @ h_int)
    )
    return abs(residual)


def admissible_test_function(grid: TimeGrid) -> SamplePath:
    """The lowest nontrivial polynomial test function with flat first and
    second derivatives at both ends: ``256 θ^4 (1-θ)^4`` (peak value 1)."""
    t = grid.points
    return SamplePath(grid, 256.0 * (t * (1.0 - t)) ** 4)


# ---------------------------------------------------------------------------
# stationary sampling (pCN) and invariance checking
# ---------------------------------------------------------------------------

def _pcn_rows(
    epsilon: float | None,
    alpha: float,
    c: float,
    n: int,
    step_size: float,
    rs: RandomSource,
    grid: TimeGrid,
    burn_in: int,
    thinning: int,
    chains: int | None,
) -> np.ndarray:
    if not (0.0 < step_size <= 1.0):
        raise ValueError("step_size must be in (0, 1]")
    if n < 1:
        raise ValueError("need n >= 1 samples")
    basis = flow_basis(grid.n_points)
    n_int = grid.n_points - 2
    mean = c * basis.stationary_mean_profile()
    # factor of the zero-average stationary covariance, mode columns
    factor = basis.modes[:, 1:] / math.sqrt(basis.h)
    w_int = np.full(n_int, basis.h)
    linear = epsilon is None or math.isinf(epsilon)

    def energy(cols: np.ndarray) -> np.ndarray:
        if linear:
            return np.zeros(cols.shape[1])
        neg = np.maximum(-(cols + alpha), 0.0)
        return (w_int @ neg**2) / (2.0 * epsilon)

    n_chains = min(chains if chains is not None else n, n)
    per_chain = -(-n // n_chains)  # ceil
    gen = rs.generator()
    x = np.tile(mean[:, None], (1, n_chains))
    ux = energy(x)
    keep = math.sqrt(1.0 - step_size**2)
    accepted = 0
    proposed = 0
    out = np.empty((n, n_int))
    got = 0

    total_sweeps = burn_in + (per_chain - 1) * thinning + 1
    for sweep in range(total_sweeps):
        z = gen.standard_normal((factor.shape[1], n_chains))
        prop = mean[:, None] + keep * (x - mean[:, None]) + step_size * (factor @ z)
        up = energy(prop)
        logu = -gen.exponential(size=n_chains)  # log of a uniform draw
        acc = logu < (ux - up)
        x[:, acc] = prop[:, acc]
        ux[acc] = up[acc]
        accepted += int(acc.sum())
        proposed += n_chains
        if sweep == burn_in - 1 and not linear:
            rate = accepted / proposed
            if rate < 0.01:
                raise ValueError(
                    f"pCN step size {step_size} too large: acceptance "
                    f"rate {rate:.4f} < 1% during burn-in"
                )
        if sweep >= burn_in and (sweep - burn_in) % thinning == 0:
            take = min(n_chains, n - got)
            out[got : got + take] = x[:, :take].T
            got += take
            if got >= n:
                break
    rows = np.zeros((n, grid.n_points))
    rows[:, 1:-1] = out
    return rows


def pcn_sample_nu(
    epsilon: float | None,
    alpha: float,
    c: float,
    n: int,
    step_size: float = 0.1,
    rs: RandomSource = RandomSource(0),
    grid: TimeGrid | None = None,
    burn_in: int = 10_000,
    thinning: int = 10,
    chains: int | None = None,
) -> list[SamplePath]:
    """Samples of the penalized stationary law via preconditioned
    Crank–Nicolson on the average-pinned Gaussian reference.

    The proposal keeps the mean profile c·(normalized parabola) and mixes the
    deviation with a zero-average Gaussian draw, so every sample's average is
    exactly c; acceptance compares the penalty energies
    ``‖(x + alpha)^-‖² / (2 epsilon)``.  ``epsilon=None`` (linear) accepts
    every proposal and reproduces the Gaussian reference.  By default each
    sample comes from its own independent chain (``chains=n``): cross-sample
    correlation would understate ensemble standard errors.  Acceptance below
    1% during burn-in raises a step-size error.
    """
    grid = grid if grid is not None else TimeGrid.unit(DEFAULT_GRID_POINTS)
    rows = _pcn_rows(
        epsilon, alpha, c, n, step_size, rs, grid, burn_in, thinning, chains
    )
    return [SamplePath(grid, r) for r in rows]


def _cov_with_se(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Sample covariance of two aligned samples with its standard error."""
    n = a.size
    da = a - a.mean()
    db = b - b.mean()
    cov = float(da @ db) / (n - 1)
    second = float(((da * db - cov) ** 2).mean())
    return cov, math.sqrt(second / n)


def invariance_check(
    config: SpdeConfig, n_traj: int, rs: RandomSource
) -> dict:
    """Start the flow from stationary samples, run one unit of time, and
    compare the evolved marginal against fresh stationary samples.

    Returns a report with z-scores for the mean path at 9 interior points
    and the covariance at 5 point pairs, plus the largest deviation of any
    trajectory average from c (which must be degenerate at c).
    """
    grid = config.grid
    start = _pcn_rows(
        config.epsilon, config.alpha, config.c, n_traj, 0.1,
        rs.child(0), grid, 10_000, 10, None,
    )
    unit_cfg = SpdeConfig(
        epsilon=config.epsilon, alpha=config.alpha, c=config.c,
        grid=grid, dt=config.dt, t_end=1.0,
    )
    evolved = run_batch_final(start, unit_cfg, rs.child(1))
    fresh = _pcn_rows(
        config.epsilon, config.alpha, config.c, n_traj, 0.1,
        rs.child(2), grid, 10_000, 10, None,
    )

    theta_points = np.linspace(0.1, 0.9, 9)
    idx = [grid.index_of(round(th / grid.spacing) * grid.spacing) for th in theta_points]
    mean_z = []
    for i in idx:
        ae, af = evolved[:, i], fresh[:, i]
        se = math.sqrt(ae.var(ddof=1) / n_traj + af.var(ddof=1) / n_traj)
        mean_z.append((ae.mean() - af.mean()) / se if se > 0 else 0.0)

    pair_thetas = [(0.25, 0.25), (0.5, 0.5), (0.75, 0.75), (0.25, 0.5), (0.25, 0.75)]
    pairs = [
        (grid.index_of(round(a / grid.spacing) * grid.spacing),
         grid.index_of(round(b / grid.spacing) * grid.spacing))
        for a, b in pair_thetas
    ]
    cov_z = []
    for i, j in pairs:
        ce, se_e = _cov_with_se(evolved[:, i], evolved[:, j])
        cf, se_f = _cov_with_se(fresh[:, i], fresh[:, j])
        se = math.hypot(se_e, se_f)
        cov_z.append((ce - cf) / se if se > 0 else 0.0)

    w = grid.quad_weights
    avg_dev = max(
        float(np.abs(evolved @ w - config.c).max()),
        float(np.abs(fresh @ w - config.c).max()),
        float(np.abs(start @ w - config.c).max()),
    )
    all_z = np.array(mean_z + cov_z)
    return {
        "mean_points": [float(grid.points[i]) for i in idx],
        "mean_z": [float(z) for z in mean_z],
        "cov_pairs": pair_thetas,
        "cov_z": [float(z) for z in cov_z],
        "max_avg_deviation": avg_dev,
        "max_abs_z": float(np.abs(all_z).max()),
        "n_traj": n_traj,
    }


# ---------------------------------------------------------------------------
# dt-refinement (strong error) diagnostic for the linear flow
# ---------------------------------------------------------------------------

def linear_refinement_errors(
    dt_values,
    refine: int,
    n_traj: int,
    rs: RandomSource,
    grid: TimeGrid | None = None,
    t_end: float = 1.0,
) -> list[float]:
    """Strong errors of the semi-implicit linear step at each dt against the
    exact flow driven by the same noise, over [0, t_end].

    The comparison runs in the first nontrivial mode of the flow basis (the
    slowest, dominant coordinate).  For each trajectory the reference
    accumulates exact-convolution increments at the finest scale
    dt_min/refine; each coarser integrator consumes the identical increments
    composed through the exact flow, so the only discrepancy is the drift
    discretization — halving dt should halve the strong error.
    """
    grid = grid if grid is not None else TimeGrid.unit(DEFAULT_GRID_POINTS)
    basis = flow_basis(grid.n_points)
    lam = float(basis.rates[1])
    dts = [float(d) for d in dt_values]
    if any(d <= 0 for d in dts) or refine < 2:
        raise ValueError("need positive dt values and refine >= 2")
    tau = min(dts) / refine
    n_fine = int(round(t_end / tau))
    for d in dts:
        if abs(round(d / tau) - d / tau) > 1e-9:
            raise ValueError("every dt must be a whole multiple of dt_min/refine")

    gen = rs.generator()
    sig_tau = math.sqrt((1.0 - math.exp(-2.0 * lam * tau)) / basis.h)
    errors = []
    # One pass per dt over the same seeded increments: regenerate the fine
    # noise identically from a child source for each integrator.
    fine_noise = gen.standard_normal((n_traj, n_fine)) * sig_tau
    # exact reference at the fine scale
    x_ref = np.zeros(n_traj)
    decay_tau = math.exp(-lam * tau)
    for k in range(n_fine):
        x_ref = decay_tau * x_ref + fine_noise[:, k]
    for d in dts:
        r = int(round(d / tau))
        shrink = 1.0 / (1.0 + lam * d)
        # compose the r fine increments through the exact flow to get the
        # stochastic convolution over one coarse step
        x = np.zeros(n_traj)
        n_coarse = n_fine // r
        for kc in range(n_coarse):
            block = fine_noise[:, kc * r : (kc + 1) * r]
            eta = block[:, 0].copy()
            for j in range(1, r):
                eta = decay_tau * eta + block[:, j]
            x = shrink * x + eta
        errors.append(float(np.sqrt(np.mean((x - x_ref) ** 2))))
    return errors
