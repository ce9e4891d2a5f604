"""Likelihood-free targets for the PRC sampler.

The intractable posterior is replaced by a kernel-smoothed one: weight the
prior by how close simulated summaries land to the observed summary,
averaged over ``s_draws`` fresh simulator calls. Shrinking the tolerance
down a schedule gives the distribution sequence the sampler tracks. Every
density evaluation re-simulates — estimates are never reused across accept
decisions — and all simulator traffic is tallied on the target's counter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .engine import CallCounter, PrcPolicy, TargetSequence, run_sampler
from .kernels import WeightingDensity
from .particles import ResampleConfig

__all__ = [
    "AbcTarget",
    "InitialSampler",
    "SimulatorFailure",
    "ToleranceSchedule",
    "abc_density_estimate",
    "closed_form_abc_posterior",
    "run_prc_abc",
]


class SimulatorFailure(RuntimeError):
    """A simulator could not produce a valid dataset for the given parameter."""


@dataclass(frozen=True)
class InitialSampler:
    """A samplable distribution mu with a computable log-density."""

    sample: Callable[[np.random.Generator], np.ndarray]
    log_density: Callable[[np.ndarray], float]


@dataclass(frozen=True)
class ToleranceSchedule:
    """Non-increasing tolerances (eps_1, ..., eps_T); eps_1 = inf is allowed.

    Repeated values are honoured literally — a tolerance appearing twice
    runs two sampler steps at that accuracy.
    """

    epsilons: tuple[float, ...]

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        if len(eps) < 1:
            raise ValueError("schedule must contain at least one tolerance")
        if any(e <= 0 for e in eps):
            raise ValueError("tolerances must be strictly positive (or inf)")
        if any(a < b for a, b in zip(eps, eps[1:])):
            raise ValueError("tolerances must be non-increasing")

    def __len__(self) -> int:
        return len(self.epsilons)

    def __iter__(self):
        return iter(self.epsilons)


@dataclass
class AbcTarget:
    """Everything needed to estimate the smoothed posterior at a point.

    ``simulator(x, rng)`` draws one synthetic dataset given the parameter;
    it may raise SimulatorFailure, which zeroes the estimate for that call
    and bumps ``counter.failures``. ``summary`` maps a dataset to the real
    vector compared against ``observed_summary``.
    """

    prior_density: Callable[[np.ndarray], float]
    simulator: Callable[[np.ndarray, np.random.Generator], object]
    summary: Callable[[object], np.ndarray]
    weighting: WeightingDensity
    s_draws: int
    observed_summary: np.ndarray
    counter: CallCounter = field(default_factory=CallCounter)

    def __post_init__(self):
        if self.s_draws < 1:
            raise ValueError("s_draws must be >= 1")
        self.observed_summary = np.atleast_1d(
            np.asarray(self.observed_summary, dtype=float)
        )


def abc_density_estimate(
    tgt: AbcTarget, x: np.ndarray, epsilon: float, rng: np.random.Generator
) -> float:
    """One stochastic estimate of the smoothed posterior density at ``x``.

    Returns prior(x) * mean over s_draws fresh simulations of the weighting
    density between simulated and observed summaries at tolerance
    ``epsilon``. An infinite tolerance short-circuits to the prior with no
    simulator calls, as does a zero prior density.
    """
    prior = float(tgt.prior_density(x))
    if prior < 0:
        raise ValueError("prior density must be non-negative")
    if prior == 0.0 or math.isinf(epsilon):
        return prior
    acc = 0.0
    for _ in range(tgt.s_draws):
        tgt.counter.calls += 1
        try:
            simulated = tgt.simulator(x, rng)
        except SimulatorFailure:
            tgt.counter.failures += 1
            return 0.0
        acc += tgt.weighting.evaluate(
            tgt.observed_summary, tgt.summary(simulated), epsilon=epsilon
        )
    if acc == 0.0:
        return 0.0  # keeps an unbounded prior from turning 0 into nan
    return prior * acc / tgt.s_draws


def run_prc_abc(
    tgt: AbcTarget,
    schedule: ToleranceSchedule,
    kernel_builder,
    policy: PrcPolicy,
    n_particles: int,
    mu: InitialSampler,
    seed: int,
    *,
    resample: ResampleConfig | None = None,
    keep_trace: bool = False,
):
    """Drive the engine down the tolerance schedule.

    Step t targets the smoothed posterior at eps_t; initial weights are
    prior/mu when eps_1 = inf (zero simulator cost). Resampling defaults to
    unconditional each step, which the skip_constant weight path requires.
    Returns the final population and per-step diagnostics.
    """
    eps = tuple(schedule)

    def log_density(t: int, x: np.ndarray, rng: np.random.Generator) -> float:
        val = abc_density_estimate(tgt, x, eps[t - 1], rng)
        return math.log(val) if val > 0.0 else -math.inf

    targets = TargetSequence(
        length=len(eps),
        log_density=log_density,
        initial_sampler=mu.sample,
        initial_log_density=mu.log_density,
        epsilons=eps,
        counter=tgt.counter,
    )
    if resample is None:
        resample = ResampleConfig(ess_threshold="always")
    return run_sampler(
        targets, kernel_builder, policy, resample, n_particles, seed,
        keep_trace=keep_trace,
    )


def closed_form_abc_posterior(kind: str, epsilon: float, x) -> np.ndarray | float:
    """Exact smoothed posterior for the standard-normal location fixture.

    With one observation at 0, unit noise and a flat prior: the gaussian
    weighting gives exactly N(0, 1 + eps^2); the uniform weighting gives
    (Phi(eps - x) - Phi(-eps - x)) / (2 eps), proportional to the posterior.
    Vectorised over ``x``.
    """
    x = np.asarray(x, dtype=float)
    if kind == "gaussian":
        if not 0.0 <= epsilon < math.inf:
            raise ValueError("gaussian kind needs finite epsilon >= 0")
        out = norm.pdf(x, scale=math.sqrt(1.0 + epsilon**2))
    elif kind == "uniform":
        if not 0.0 < epsilon < math.inf:
            raise ValueError("uniform kind needs finite epsilon > 0")
        out = (norm.cdf(epsilon - x) - norm.cdf(-epsilon - x)) / (2.0 * epsilon)
    else:
        raise ValueError(f"unknown weighting kind {kind!r}")
    return out if out.ndim else float(out)
