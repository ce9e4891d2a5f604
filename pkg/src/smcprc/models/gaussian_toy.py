"""Gaussian location fixture with a known smoothed posterior.

One datum observed at 0, unit observation noise, flat prior: the smoothed
posterior is available in closed form for both weighting kinds (see
``closed_form_abc_posterior``), which makes this the calibration problem
for the sampler. Tolerances are always quoted on the gaussian scale;
uniform runs divide by sqrt(3) so both kinds weight with equal variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..abc import AbcTarget, InitialSampler, ToleranceSchedule, run_prc_abc
from ..engine import PrcPolicy
from ..kernels import AbsoluteDistance, GaussianMixtureKernel, WeightingDensity
from ..particles import ParticleSystem

__all__ = [
    "EPSILON_SCALE_FACTOR",
    "GAUSSIAN_EPSILON_SCHEDULE",
    "GaussianToyModel",
    "ToyConfig",
    "gaussian_kde_builder",
    "run_toy",
    "toy_model_bindings",
    "toy_mu_sampler",
    "toy_schedule",
]

# matched-variance conversion between weighting kinds: eps_g = sqrt(3) * eps_u
EPSILON_SCALE_FACTOR = math.sqrt(3.0)

# reference tolerance ladder, gaussian scale; the repeated last value is two
# genuine steps at the target accuracy
GAUSSIAN_EPSILON_SCHEDULE = (
    math.inf, 10.0, 5.0, 2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.05,
)


@dataclass(frozen=True)
class GaussianToyModel:
    """Single observation D ~ N(x, 1), flat prior truncated to the mu support."""

    observed_datum: float = 0.0
    mu_support: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        lo, hi = self.mu_support
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError("mu_support must be a finite interval (lo, hi)")

    def prior_density(self, x) -> float:
        lo, hi = self.mu_support
        return 1.0 if lo < float(np.asarray(x).reshape(-1)[0]) < hi else 0.0

    def simulate(self, x, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1)[:1] + rng.standard_normal(1)


@dataclass(frozen=True)
class ToyConfig:
    """Run settings for the fixture (tolerances on the gaussian scale)."""

    weighting_kind: str = "gaussian"
    s_draws: int = 1
    n_particles: int = 1000
    tau_sq: float = 1.0
    schedule: tuple[float, ...] = GAUSSIAN_EPSILON_SCHEDULE

    def __post_init__(self):
        if self.weighting_kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown weighting kind {self.weighting_kind!r}")


def toy_model_bindings(cfg: ToyConfig) -> AbcTarget:
    """Wire the fixture into a likelihood-free target."""
    model = GaussianToyModel()
    return AbcTarget(
        prior_density=model.prior_density,
        simulator=model.simulate,
        summary=lambda data: np.atleast_1d(np.asarray(data, dtype=float)),
        weighting=WeightingDensity(kind=cfg.weighting_kind, distance=AbsoluteDistance()),
        s_draws=cfg.s_draws,
        observed_summary=np.array([model.observed_datum]),
    )


def toy_schedule(cfg: ToyConfig) -> ToleranceSchedule:
    """The tolerance ladder, rescaled to the uniform kind when needed."""
    eps = cfg.schedule
    if cfg.weighting_kind == "uniform":
        eps = tuple(e / EPSILON_SCALE_FACTOR for e in eps)
    return ToleranceSchedule(epsilons=eps)


def toy_mu_sampler(model: GaussianToyModel | None = None) -> InitialSampler:
    """Uniform initial distribution over the model's support interval."""
    model = model or GaussianToyModel()
    lo, hi = model.mu_support
    log_dens = -math.log(hi - lo)

    def sample(rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(lo, hi)])

    def log_density(x) -> float:
        return log_dens if lo < float(np.asarray(x).reshape(-1)[0]) < hi else -math.inf

    return InitialSampler(sample=sample, log_density=log_density)


def gaussian_kde_builder(tau_sq: float = 1.0):
    """Mutation-kernel factory: gaussian KDE over the selected population."""

    def build(system: ParticleSystem) -> GaussianMixtureKernel:
        norm = system.normalize()
        return GaussianMixtureKernel(norm.values, norm.weights, tau_sq=tau_sq)

    return build


def run_toy(
    cfg: ToyConfig,
    policy: PrcPolicy,
    seed: int,
    *,
    keep_trace: bool = False,
):
    """One full sampler run on the fixture; returns (population, diagnostics)."""
    return run_prc_abc(
        toy_model_bindings(cfg),
        toy_schedule(cfg),
        gaussian_kde_builder(cfg.tau_sq),
        policy,
        cfg.n_particles,
        toy_mu_sampler(),
        seed,
        keep_trace=keep_trace,
    )
