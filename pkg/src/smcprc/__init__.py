"""Sequential Monte Carlo sampling with partial rejection control.

An SMC sampler whose mutation stage rejects low-weight proposals and
redraws, trading extra simulator calls for a better-conditioned particle
population — built for likelihood-free (simulator-based) posteriors, with
two worked problems: a Gaussian location fixture with a closed-form answer
and distribution-free chain-ladder claims reserving.
"""

from .abc import (
    AbcTarget,
    InitialSampler,
    SimulatorFailure,
    ToleranceSchedule,
    abc_density_estimate,
    closed_form_abc_posterior,
    run_prc_abc,
)
from .engine import (
    CallCounter,
    PrcPolicy,
    PrcStarvationError,
    StepDiagnostics,
    TargetSequence,
    alive_accounting,
    estimate_r_monte_carlo,
    prc_accept_loop,
    run_sampler,
)
from .kernels import (
    AbsoluteDistance,
    BackwardKernelChoice,
    EuclideanDistance,
    GammaMixtureKernel,
    GaussianMixtureKernel,
    MahalanobisDistance,
    WeightingDensity,
)
from .particles import (
    DegeneratePopulationError,
    ParticleSystem,
    ResampleConfig,
    effective_sample_size,
    resample_multinomial,
    weighted_quantile,
)
from .rng import substream

__version__ = "0.1.0"

__all__ = [
    "AbcTarget",
    "AbsoluteDistance",
    "BackwardKernelChoice",
    "CallCounter",
    "DegeneratePopulationError",
    "EuclideanDistance",
    "GammaMixtureKernel",
    "GaussianMixtureKernel",
    "InitialSampler",
    "MahalanobisDistance",
    "ParticleSystem",
    "PrcPolicy",
    "PrcStarvationError",
    "ResampleConfig",
    "SimulatorFailure",
    "StepDiagnostics",
    "TargetSequence",
    "ToleranceSchedule",
    "WeightingDensity",
    "abc_density_estimate",
    "alive_accounting",
    "closed_form_abc_posterior",
    "effective_sample_size",
    "estimate_r_monte_carlo",
    "prc_accept_loop",
    "resample_multinomial",
    "run_prc_abc",
    "run_sampler",
    "substream",
    "weighted_quantile",
]
