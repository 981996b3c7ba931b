"""Sequential probabilistic matrix factorization.

Factorizes a partially observed data stream Y as C X, column by column, with
a matrix-normal prior on the dictionary C and a state-space model driving the
coefficient columns x_k. Each incoming column triggers one approximate
filtering step that updates both posteriors in closed form. A Student-t
variant rescales the posteriors from the observed residual so heavy-tailed
noise does not destabilize the recursion, and the transition parameters can
be estimated online or by repeated passes over the data.
"""

from __future__ import annotations

from .core import (
    CoefficientPosterior,
    DataMatrix,
    DictionaryPosterior,
    NoiseConfig,
    check_psd,
    solve_spd,
    sqrt_psd,
    symmetrize_spd,
    woodbury_apply,
    woodbury_solve,
)
from .errors import (
    ConfigError,
    ContractError,
    DiscretizationError,
    DivergenceError,
    EmptyObservationError,
    NumericalError,
    ParseError,
    SingularMatrixError,
)
from .estimation import (
    AdamState,
    FitResult,
    NllContext,
    OptimizerConfig,
    adam_step,
    iterative_fit,
    masked_frobenius,
    nll_gradient,
    nll_step,
    recursive_fit,
    recursive_steps,
)
from .evaluation import (
    ConvergenceResult,
    GaussianMoments,
    ImputationMetrics,
    SyntheticSpec,
    build_model,
    column_mean_baseline,
    convergence_experiment,
    draw_measurement_noise,
    generate_segment_mask,
    generate_synthetic,
    imputation_metrics,
    rng_stream,
    vectorized_kalman_oracle,
    wasserstein2_gaussian,
)
from .filtering import (
    FilterRun,
    FilterState,
    FilterTraceEntry,
    compute_eta,
    filter_step,
    forecast,
    gaussian_nll_increment,
    initial_state,
    predict,
    reconstruct_and_impute,
    run_filter,
    update_coefficients,
    update_dictionary,
)
from .io import load_matrix, write_json, write_matrix, write_table
from .robust import (
    RobustState,
    coefficient_scale_factor,
    dictionary_scale_factor,
    robust_filter_step,
    robust_initial_state,
    run_robust_filter,
    student_t_nll_increment,
)
from .subspace import GPMaternParams, SubspaceModel, gp_discretize, matrix_exponential

__all__ = [
    "AdamState",
    "CoefficientPosterior",
    "ConfigError",
    "ContractError",
    "ConvergenceResult",
    "DataMatrix",
    "DictionaryPosterior",
    "DiscretizationError",
    "DivergenceError",
    "EmptyObservationError",
    "FilterRun",
    "FilterState",
    "FilterTraceEntry",
    "FitResult",
    "GPMaternParams",
    "GaussianMoments",
    "ImputationMetrics",
    "NllContext",
    "NoiseConfig",
    "NumericalError",
    "OptimizerConfig",
    "ParseError",
    "RobustState",
    "SingularMatrixError",
    "SubspaceModel",
    "SyntheticSpec",
    "adam_step",
    "build_model",
    "check_psd",
    "coefficient_scale_factor",
    "column_mean_baseline",
    "compute_eta",
    "convergence_experiment",
    "dictionary_scale_factor",
    "draw_measurement_noise",
    "filter_step",
    "forecast",
    "gaussian_nll_increment",
    "generate_segment_mask",
    "generate_synthetic",
    "gp_discretize",
    "imputation_metrics",
    "initial_state",
    "iterative_fit",
    "load_matrix",
    "masked_frobenius",
    "matrix_exponential",
    "nll_gradient",
    "nll_step",
    "predict",
    "reconstruct_and_impute",
    "recursive_fit",
    "recursive_steps",
    "rng_stream",
    "robust_filter_step",
    "robust_initial_state",
    "run_filter",
    "run_robust_filter",
    "solve_spd",
    "sqrt_psd",
    "student_t_nll_increment",
    "symmetrize_spd",
    "update_coefficients",
    "update_dictionary",
    "vectorized_kalman_oracle",
    "wasserstein2_gaussian",
    "woodbury_apply",
    "woodbury_solve",
    "write_json",
    "write_matrix",
    "write_table",
]

__version__ = "0.1.0"
