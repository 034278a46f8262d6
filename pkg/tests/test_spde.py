"""Semi-implicit integrator for the penalized fourth-order conservative
flow: penalty, stepping, reflection bookkeeping, weak-form audit, the
stationary pCN sampler, and invariance diagnostics."""

from __future__ import annotations

import math

import numpy as np
import pytest
from helpers_stats import cov_with_se, mean_with_se, var_with_se, z_between

from exlab.operators import kernel_Qinf, pinned_average_measure
from exlab.path_core import RandomSource, SamplePath, TimeGrid, path_average
from exlab.spde import (
    SpdeConfig,
    SpdeState,
    admissible_test_function,
    initial_profile,
    invariance_check,
    linear_refinement_errors,
    pcn_sample_nu,
    penalty,
    run,
    run_batch_final,
    step,
    weak_form_residual,
)

G = TimeGrid.unit(129)


def dipped_state(alpha_margin: float = 0.2) -> SpdeState:
    """A field equal to the stationary mean except for a flat dip to
    -alpha_margin on nodes 40..59 (inside the default compact window)."""
    cfg = SpdeConfig(grid=G, c=0.6)
    u = initial_profile(cfg).values.copy()
    u[40:60] = -alpha_margin
    return SpdeState(u=SamplePath(G, u))


# ---------------------------------------------------------------------------
# penalty
# ---------------------------------------------------------------------------


def test_penalty_is_zero_at_or_above_the_shift():
    u = SamplePath(G, np.full(129, -0.05))
    out = penalty(u, 1e-2, 0.05)
    assert np.all(out.values == 0.0)


def test_penalty_on_a_deep_constant_is_one():
    eps, alpha = 1e-2, 0.05
    u = SamplePath(G, np.full(129, -alpha - eps))
    out = penalty(u, eps, alpha)
    assert np.abs(out.values - 1.0).max() <= 1e-12


def test_penalty_is_pointwise_nonincreasing_in_the_field():
    gen = RandomSource(900).generator()
    lo = gen.standard_normal(129)
    hi = lo + np.abs(gen.standard_normal(129))
    p_lo = penalty(SamplePath(G, lo), 1e-2, 0.05).values
    p_hi = penalty(SamplePath(G, hi), 1e-2, 0.05).values
    assert np.all(p_hi <= p_lo)


def test_penalty_requires_positive_epsilon():
    u = SamplePath(G, np.zeros(129))
    with pytest.raises(ValueError):
        penalty(u, 0.0, 0.05)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SpdeConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        SpdeConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        SpdeConfig(c=-0.5)
    with pytest.raises(ValueError):
        SpdeConfig(grid=TimeGrid(0.0, 0.5, 65))
    with pytest.raises(ValueError):
        SpdeConfig(grid=TimeGrid.unit(5))
    with pytest.raises(ValueError):
        SpdeConfig(dt=0.0)
    with pytest.raises(ValueError):
        SpdeConfig(t_end=-1.0)


def test_config_stability_flag_and_step_count():
    assert SpdeConfig(epsilon=1e-2, dt=8e-4).penalty_stable
    assert not SpdeConfig(epsilon=1e-2, dt=8.1e-4).penalty_stable
    assert SpdeConfig(epsilon=None, dt=1.0).penalty_stable
    assert SpdeConfig(epsilon=math.inf, dt=1.0).is_linear
    assert SpdeConfig(dt=1e-4, t_end=1.0).n_steps == 10_000


def test_initial_profile_pins_the_average_exactly():
    cfg = SpdeConfig(grid=G, c=0.73)
    x0 = initial_profile(cfg)
    assert abs(path_average(x0) - 0.73) <= 1e-12
    assert x0.values[0] == 0.0 and x0.values[-1] == 0.0


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def test_step_conserves_the_average_with_active_penalty():
    cfg = SpdeConfig(epsilon=1e-1, alpha=0.05, c=0.6, grid=G, dt=1e-5)
    state = dipped_state()
    a0 = path_average(state.u)
    rs = RandomSource(910)
    for k in range(50):
        state = step(state, cfg, rs)
        assert abs(path_average(state.u) - a0) <= 1e-10
        assert state.time == pytest.approx((k + 1) * cfg.dt)
        assert np.all(state.eta_accum >= 0.0)
    assert state.eta_accum.sum() > 0.0, "the dip must shed reflection mass"


def test_step_without_active_penalty_matches_linear_exactly():
    cfg_pen = SpdeConfig(epsilon=1e-2, alpha=0.05, c=0.6, grid=G, dt=1e-5)
    cfg_lin = SpdeConfig(epsilon=None, alpha=0.05, c=0.6, grid=G, dt=1e-5)
    x0 = initial_profile(cfg_pen)
    out_pen = step(SpdeState(u=x0), cfg_pen, RandomSource(912))
    out_lin = step(SpdeState(u=x0), cfg_lin, RandomSource(912))
    assert np.array_equal(out_pen.u.values, out_lin.u.values)
    assert np.all(out_pen.eta_accum == 0.0)
    assert out_pen.contact_accum == 0.0


def test_step_accumulates_reflection_only_below_the_shift():
    cfg = SpdeConfig(epsilon=1e-1, alpha=0.05, c=0.6, grid=G, dt=1e-5)
    state = dipped_state()
    below = state.u.values < -cfg.alpha
    out = step(state, cfg, RandomSource(913))
    assert np.all(out.eta_accum[below] > 0.0)
    assert np.all(out.eta_accum[~below] == 0.0)
    assert out.contact_accum < 0.0, "contact pairs the dip against its mass"


def test_step_contact_is_never_positive_without_shift():
    cfg = SpdeConfig(epsilon=1e-1, alpha=0.0, c=0.0, grid=G, dt=1e-4)
    state = SpdeState(u=SamplePath(G, np.zeros(129)))
    rs = RandomSource(914)
    prev = 0.0
    for _ in range(30):
        state = step(state, cfg, rs)
        assert state.contact_accum <= prev + 1e-15
        prev = state.contact_accum
    assert state.contact_accum < 0.0


def test_step_rejects_mismatched_grid():
    cfg = SpdeConfig(grid=G)
    other = SpdeState(u=SamplePath(TimeGrid.unit(65), np.zeros(65)))
    with pytest.raises(ValueError):
        step(other, cfg, RandomSource(1))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def test_run_validates_the_start_path():
    cfg = SpdeConfig(epsilon=None, c=0.6, grid=G, dt=1e-3, t_end=0.01)
    bad_end = SamplePath(G, np.full(129, 0.6))
    with pytest.raises(ValueError):
        run(bad_end, cfg, RandomSource(1))
    off_avg = SamplePath(G, initial_profile(cfg).values * 1.5)
    with pytest.raises(ValueError):
        run(off_avg, cfg, RandomSource(1))
    wrong_grid = SamplePath(TimeGrid.unit(65), np.zeros(65))
    with pytest.raises(ValueError):
        run(wrong_grid, cfg, RandomSource(1))


def test_run_linear_snapshots_conserve_the_average():
    cfg = SpdeConfig(epsilon=None, c=0.7, grid=G, dt=1e-3, t_end=1.0)
    log = run(initial_profile(cfg), cfg, RandomSource(911))
    assert len(log.times) == 9
    assert all(b > a for a, b in zip(log.times, log.times[1:]))
    assert max(abs(a - 0.7) for a in log.averages) <= 1e-8
    assert log.eta_compact_mass == [0.0] * 9
    assert log.contact == [0.0] * 9
    assert len(log.snapshots) == len(log.min_values) == 9


def test_trajectory_log_snapshot_lookup():
    cfg = SpdeConfig(epsilon=None, c=0.6, grid=G, dt=1e-3, t_end=0.1,
                     snapshot_times=(0.0, 0.05, 0.1))
    log = run(initial_profile(cfg), cfg, RandomSource(915))
    assert log.snapshot_index(0.05) == 1
    with pytest.raises(ValueError):
        log.snapshot_index(0.07)


def test_run_windowed_occupation_stays_below_one_percent():
    """Penalized equilibrium keeps the field above twice the shift depth on
    the compact window, up to rare excursions (< 1% of samples)."""
    cfg = SpdeConfig(
        epsilon=1e-3, alpha=0.05, c=0.6, grid=G, dt=4e-6, t_end=1.2,
        occupation_thresholds=(-0.1,), occupation_burn_in=1.0,
    )
    log = run(initial_profile(cfg), cfg, RandomSource(909))
    assert log.occupation_fractions is not None
    frac = log.occupation_fractions[-0.1]
    assert 0.0 <= frac < 0.01, f"occupation fraction {frac:.4f}"


# ---------------------------------------------------------------------------
# weak-form audit
# ---------------------------------------------------------------------------


def _weak_log(dt: float):
    cfg = SpdeConfig(
        epsilon=1e-2, alpha=0.05, c=0.6, grid=G, dt=dt, t_end=0.6,
        snapshot_times=(0.0, 0.1, 0.6), record_weak_data=True,
    )
    return run(initial_profile(cfg), cfg, RandomSource(808))


def test_weak_form_residual_scales_linearly_in_dt():
    h = admissible_test_function(G)
    norm = math.sqrt(float((h.values**2) @ G.quad_weights))
    log1 = _weak_log(1e-4)
    res1 = weak_form_residual(log1, h, 0.1, 0.6)
    assert res1 < 2e4 * 1e-4 * norm
    log2 = _weak_log(5e-5)
    res2 = weak_form_residual(log2, h, 0.1, 0.6)
    assert res2 < 0.75 * res1


def test_weak_form_constant_test_function_telescopes():
    log = _weak_log(1e-3)
    ones = SamplePath(G, np.ones(129))
    assert weak_form_residual(log, ones, 0.1, 0.6) < 1e-8


def test_weak_form_is_exactly_linear_in_the_test_function():
    log = _weak_log(1e-3)
    h = admissible_test_function(G)
    doubled = SamplePath(G, 2.0 * h.values)
    assert weak_form_residual(log, doubled, 0.1, 0.6) == 2.0 * weak_form_residual(
        log, h, 0.1, 0.6
    )


def test_weak_form_validates_inputs():
    log = _weak_log(1e-3)
    sloped = SamplePath(G, np.sin(math.pi * G.points))
    with pytest.raises(ValueError, match="inadmissible"):
        weak_form_residual(log, sloped, 0.1, 0.6)
    h = admissible_test_function(G)
    with pytest.raises(ValueError):
        weak_form_residual(log, h, 0.6, 0.1)
    cfg = SpdeConfig(epsilon=None, c=0.6, grid=G, dt=1e-3, t_end=0.1)
    bare = run(initial_profile(cfg), cfg, RandomSource(1))
    with pytest.raises(ValueError, match="weak-form"):
        weak_form_residual(bare, h, 0.0, 0.1)


# ---------------------------------------------------------------------------
# linear-flow distribution checks
# ---------------------------------------------------------------------------


def test_linear_flow_reaches_the_stationary_covariance():
    cfg = SpdeConfig(epsilon=None, c=0.6, grid=G, dt=5e-4, t_end=1.5)
    x0 = np.tile(initial_profile(cfg).values, (400, 1))
    rows = run_batch_final(x0, cfg, RandomSource(2026))
    kernel = kernel_Qinf(G).matrix
    for a, b in ((0.25, 0.25), (0.5, 0.5), (0.75, 0.75), (0.25, 0.5), (0.25, 0.75)):
        i, j = G.index_of(a), G.index_of(b)
        cv, se = cov_with_se(rows[:, i], rows[:, j])
        z = (cv - kernel[i, j]) / se
        assert abs(z) <= 3.0, f"pair ({a},{b}): z = {z:.2f}"


def test_semi_implicit_strong_error_halves_with_dt():
    errors = linear_refinement_errors(
        (5e-4, 2.5e-4), refine=4, n_traj=512, rs=RandomSource(2027),
        grid=G, t_end=0.5,
    )
    assert errors[0] > errors[1] > 0.0
    ratio = errors[1] / errors[0]
    assert 0.4 <= ratio <= 0.6, f"refinement ratio {ratio:.3f}"


def test_invariance_check_reports_stationarity():
    cfg = SpdeConfig(epsilon=None, c=0.6, grid=G, dt=2e-4, t_end=1.0)
    report = invariance_check(cfg, 64, RandomSource(2025))
    assert len(report["mean_z"]) == 9
    assert len(report["cov_z"]) == 5
    assert report["n_traj"] == 64
    assert report["max_avg_deviation"] <= 1e-8
    assert report["max_abs_z"] < 3.0


# ---------------------------------------------------------------------------
# stationary pCN sampler
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def linear_chain_rows():
    paths = pcn_sample_nu(None, 0.05, 0.6, 4000, rs=RandomSource(3131), grid=G)
    return np.stack([p.values for p in paths])


@pytest.fixture(scope="module")
def penalized_chain_rows():
    paths = pcn_sample_nu(1e-3, 0.05, 0.6, 4000, rs=RandomSource(3232), grid=G)
    return np.stack([p.values for p in paths])


def test_linear_chain_matches_the_pinned_gaussian_reference(linear_chain_rows):
    ref = pinned_average_measure(G, 0.6).sample_batch(RandomSource(3133), 4000)
    mid = G.index_of(0.5)
    mc, sc = mean_with_se(linear_chain_rows[:, mid])
    mr, sr = mean_with_se(ref[:, mid])
    assert abs(z_between(mc, sc, mr, sr)) <= 3.0
    vc, vsc = var_with_se(linear_chain_rows[:, mid])
    assert abs(vc - 1.0 / 16.0) <= 3.0 * vsc


def test_chain_samples_pin_the_average_exactly(
    linear_chain_rows, penalized_chain_rows
):
    w = G.quad_weights
    assert np.abs(linear_chain_rows @ w - 0.6).max() <= 1e-9
    assert np.abs(penalized_chain_rows @ w - 0.6).max() <= 1e-9


def test_penalized_chain_suppresses_deep_interior_dips(
    linear_chain_rows, penalized_chain_rows
):
    """At penalty depth 1e-3 the equilibrium puts visibly less mass on deep
    dips (below three shift depths) inside the compact window than the
    unpenalized reference; gates frozen from the pilot calibration."""
    window = (G.points >= 0.1) & (G.points <= 0.9)
    pen = float((penalized_chain_rows[:, window].min(axis=1) < -0.15).mean())
    lin = float((linear_chain_rows[:, window].min(axis=1) < -0.15).mean())
    assert pen < 0.10, f"penalized fraction {pen:.4f}"
    assert lin > 0.10, f"reference fraction {lin:.4f}"
    assert pen < lin - 0.03


def test_every_linear_proposal_is_accepted():
    """With unit step size each proposal is an independent redraw, so any
    rejection would repeat the previous sample exactly; the linear chain
    accepts everything, the penalized chain visibly does not."""
    kwargs = dict(step_size=1.0, grid=G, burn_in=100, thinning=1, chains=1)
    lin = pcn_sample_nu(None, 0.05, 0.6, 50, rs=RandomSource(71), **kwargs)
    lin_rows = np.stack([p.values for p in lin])
    for a, b in zip(lin_rows, lin_rows[1:]):
        assert not np.array_equal(a, b)
    pen = pcn_sample_nu(1e-2, 0.05, 0.6, 50, rs=RandomSource(71), **kwargs)
    pen_rows = np.stack([p.values for p in pen])
    assert any(
        np.array_equal(a, b) for a, b in zip(pen_rows, pen_rows[1:])
    ), "the penalized chain at unit step must reject sometimes"


def test_chain_reports_hopeless_step_size():
    with pytest.raises(ValueError, match="acceptance"):
        pcn_sample_nu(
            1e-8, 0.0, 0.6, 4, step_size=1.0, rs=RandomSource(72),
            grid=G, burn_in=200, thinning=1, chains=1,
        )


def test_chain_validates_arguments():
    with pytest.raises(ValueError):
        pcn_sample_nu(None, 0.0, 0.6, 2, step_size=0.0, grid=G)
    with pytest.raises(ValueError):
        pcn_sample_nu(None, 0.0, 0.6, 2, step_size=1.5, grid=G)
    with pytest.raises(ValueError):
        pcn_sample_nu(None, 0.0, 0.6, 0, grid=G)


# ---------------------------------------------------------------------------
# stability guard
# ---------------------------------------------------------------------------


def test_unstable_penalty_step_blows_up_loudly():
    cfg = SpdeConfig(
        epsilon=1e-3, alpha=0.05, c=0.0, grid=G, dt=1e-4, t_end=0.25
    )
    assert not cfg.penalty_stable
    x0 = SamplePath(G, np.zeros(129))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RuntimeError, match="blew up"):
            run(x0, cfg, RandomSource(916))
