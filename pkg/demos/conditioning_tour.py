"""Tour of the path-conditioning toolkit.

Walks through the pieces in the order they build on each other:

1. the conditioning kits for bridge-type and free-endpoint paths, with their
   closed-form constants;
2. the change-of-measure identity that lets a cheap unconditioned ensemble
   answer questions about the conditioned law (reweighting vs conditioning);
3. weighted ensembles of positive paths with a pinned time average;
4. the density of the time average, and conditional expectations given it.

Everything is seeded, so the printed numbers are reproducible.

Run:  python3 demos/conditioning_tour.py
"""

from __future__ import annotations

import numpy as np

from exlab.conditioning import (
    conditional_expectation,
    estimate_density_excursion,
    excursion_average_kit,
    excursion_weighted_ensemble,
    meander_average_kit,
)
from exlab.path_core import RandomSource, TimeGrid, brownian_bridge_batch

rs = RandomSource(2025)


def section(title: str) -> None:
    print(f"\n=== {title} ===")


# -- 1. kits and their constants --------------------------------------------

section("conditioning kits")
ex_kit = excursion_average_kit(0.6)
me_kit = meander_average_kit(0.6)
print(f"bridge-type kit:  pinned variance = {ex_kit.pinned_variance:.9f}"
      f"  (closed form 26/27 = {26 / 27:.9f})")
print(f"free-endpoint kit: pinned variance = {me_kit.pinned_variance:.9f}"
      f"  (closed form 7/8  = {7 / 8:.9f})")
print(f"constraint residuals: orthogonality {ex_kit.residual_orthogonality:.2e},"
      f" normalization {ex_kit.residual_normalization:.2e}")

# -- 2. conditioning = reweighting ------------------------------------------

section("conditioning a path functional vs reweighting the proposal")
grid = ex_kit.grid
w = grid.quad_weights
rows = brownian_bridge_batch(grid, 0.0, 0.0, rs.child(0), 20_000)
conditioned_mid = ex_kit.conditioned(rows)[:, grid.index_of(0.5)]
proposal = ex_kit.proposal(rows)
weights = ex_kit.importance_weight(rows)
reweighted_mid = proposal[:, grid.index_of(0.5)] * weights
print(f"E[midpoint of conditioned path]        = {conditioned_mid.mean():+.5f}")
print(f"E[midpoint of proposal x weight]       = {reweighted_mid.mean():+.5f}")
print(f"E[weight] (should be 1)                = {weights.mean():.5f}")
print("same number two ways: the weighted proposal ensemble IS the"
      " conditioned law")

# -- 3. positive paths with a pinned average --------------------------------

section("weighted ensembles of positive paths")
for c in (0.4, 0.6, 0.9):
    ens = excursion_weighted_ensemble(c, 4000, rs.child(10).child(int(c * 10)))
    avg = ens.paths @ ens.grid.quad_weights
    wts = ens.weights
    ess = float(wts.sum() ** 2 / (wts**2).sum())
    print(f"c = {c:.1f}: {ens.paths.shape[0]} paths, time average pinned to "
          f"{avg.mean():.5f} (max dev {np.abs(avg - c).max():.1e}), "
          f"effective sample size {ess:.0f}")

# -- 4. density of the time average and conditional expectations ------------

section("density of the time average (positive bridge-type paths)")
for c in (0.3, 0.6267, 1.0):
    est = estimate_density_excursion(c, 40_000, rs.child(20).child(int(c * 1e4)))
    print(f"p({c:<6}) = {est.value:.4f}  +/- {est.std_error:.4f}")

section("conditional expectations given the time average")


def midpoint(rows_, grid_):
    return rows_[:, (grid_.n_points - 1) // 2]


for c in (0.4, 0.6, 0.9):
    val, se = conditional_expectation(midpoint, c, 20_000, rs.child(30).child(int(c * 10)))
    print(f"E[path(1/2) | average = {c:.1f}] = {val:.4f} +/- {se:.4f}")

print("\ndone.")
