"""Reference problems: the Gaussian location fixture and claims reserving."""

from .chain_ladder import (
    DOLLARS_PER_UNIT,
    SIGMA_REPORT_SCALE,
    TABLE1_ANNUAL,
    BootstrapDraw,
    ChainLadderParams,
    ChainLadderPrediction,
    ChainLadderPriors,
    ClaimsRunResult,
    ClaimsTriangle,
    bootstrap_simulate,
    calibrate_final_tolerance,
    chain_ladder_predict,
    claims_bindings,
    claims_kernel_builder,
    claims_mu_sampler,
    claims_schedule,
    claims_summary_and_distance,
    classical_chain_ladder,
    conditional_residuals,
    observed_summary_vector,
    pilot_covariance,
    reconstruct_triangle,
    run_claims,
)
from .gaussian_toy import (
    EPSILON_SCALE_FACTOR,
    GAUSSIAN_EPSILON_SCHEDULE,
    GaussianToyModel,
    ToyConfig,
    gaussian_kde_builder,
    run_toy,
    toy_model_bindings,
    toy_mu_sampler,
    toy_schedule,
)

__all__ = [
    "BootstrapDraw",
    "ChainLadderParams",
    "ChainLadderPrediction",
    "ChainLadderPriors",
    "ClaimsRunResult",
    "ClaimsTriangle",
    "DOLLARS_PER_UNIT",
    "EPSILON_SCALE_FACTOR",
    "GAUSSIAN_EPSILON_SCHEDULE",
    "GaussianToyModel",
    "SIGMA_REPORT_SCALE",
    "TABLE1_ANNUAL",
    "ToyConfig",
    "bootstrap_simulate",
    "calibrate_final_tolerance",
    "chain_ladder_predict",
    "claims_bindings",
    "claims_kernel_builder",
    "claims_mu_sampler",
    "claims_schedule",
    "claims_summary_and_distance",
    "classical_chain_ladder",
    "conditional_residuals",
    "gaussian_kde_builder",
    "observed_summary_vector",
    "pilot_covariance",
    "reconstruct_triangle",
    "run_claims",
    "run_toy",
    "toy_model_bindings",
    "toy_mu_sampler",
    "toy_schedule",
]
