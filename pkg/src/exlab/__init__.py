"""exlab: Gaussian path laws conditioned on their time average, positive
glued-path proposals with explicit importance weights, the density of the
time average for nonnegative path laws, and a conservative fourth-order
stochastic flow with soft reflection.

Layers (each module also works on its own):

* :mod:`exlab.path_core` — uniform time grids, sample paths, seeded random
  sources, and batch samplers for the classical path laws.
* :mod:`exlab.operators` — covariance kernels, discrete Laplacians, the
  interior factorization of the conservative flow, and Gaussian measures.
* :mod:`exlab.conditioning` — the linear-conditioning kit, glued positive
  proposals, importance weights, density and conditional-expectation
  estimators.
* :mod:`exlab.spde` — the semi-implicit integrator for the conservative
  flow with explicit penalty, stationary sampling, and diagnostics.
* :mod:`exlab.cli` — the ``exlab`` command-line front end.
"""

from exlab.path_core import (
    RandomSource,
    SamplePath,
    TimeGrid,
    bessel3_bridge_batch,
    brownian_bridge_batch,
    brownian_motion_batch,
    meander_batch,
    path_average,
    sample_bessel3_bridge,
    sample_brownian_bridge,
    sample_brownian_motion,
    sample_meander,
)
from exlab.operators import (
    DiscreteLaplacian,
    FlowBasis,
    GaussianMeasureSpec,
    KernelOperator,
    bridge_measure,
    covariance_Qt,
    flow_basis,
    h_inner,
    kernel_Q,
    kernel_QD,
    kernel_Qinf,
    kernel_brownian_motion,
    laplacian,
    mean_a,
    pinned_average_measure,
    sample_gaussian,
    semigroup_apply,
)
from exlab.conditioning import (
    ConditioningKit,
    DensityEstimate,
    SignedMeasureOnUnit,
    WeightedEnsemble,
    build_conditioning_kit,
    conditional_expectation,
    density_curve_excursion,
    density_curve_meander,
    estimate_density_excursion,
    estimate_density_meander,
    excursion_average_kit,
    excursion_proposal,
    excursion_proposal_weight,
    excursion_weighted_ensemble,
    gaussian_shift_identity,
    meander_average_kit,
    meander_proposal,
    meander_proposal_weight,
    meander_weighted_ensemble,
    pair,
    pin_average_middle,
    pin_average_parabola,
    q_transform,
)
from exlab.spde import (
    SpdeConfig,
    SpdeState,
    TrajectoryLog,
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

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # path_core
    "RandomSource", "SamplePath", "TimeGrid",
    "bessel3_bridge_batch", "brownian_bridge_batch", "brownian_motion_batch",
    "meander_batch", "path_average",
    "sample_bessel3_bridge", "sample_brownian_bridge",
    "sample_brownian_motion", "sample_meander",
    # operators
    "DiscreteLaplacian", "FlowBasis", "GaussianMeasureSpec", "KernelOperator",
    "bridge_measure", "covariance_Qt", "flow_basis", "h_inner",
    "kernel_Q", "kernel_QD", "kernel_Qinf", "kernel_brownian_motion",
    "laplacian", "mean_a", "pinned_average_measure", "sample_gaussian",
    "semigroup_apply",
    # conditioning
    "ConditioningKit", "DensityEstimate", "SignedMeasureOnUnit",
    "WeightedEnsemble", "build_conditioning_kit", "conditional_expectation",
    "density_curve_excursion", "density_curve_meander",
    "estimate_density_excursion", "estimate_density_meander",
    "excursion_average_kit", "excursion_proposal", "excursion_proposal_weight",
    "excursion_weighted_ensemble", "gaussian_shift_identity",
    "meander_average_kit", "meander_proposal", "meander_proposal_weight",
    "meander_weighted_ensemble", "pair", "pin_average_middle",
    "pin_average_parabola", "q_transform",
    # spde
    "SpdeConfig", "SpdeState", "TrajectoryLog", "admissible_test_function",
    "initial_profile", "invariance_check", "linear_refinement_errors",
    "pcn_sample_nu", "penalty", "run", "run_batch_final", "step",
    "weak_form_residual",
]
