"""The SMC sampler loop with partial rejection control.

One step of the sampler: select (resample) the previous population, rebuild
the global mutation kernel from the survivors, mutate every slot once to
obtain the raw-weight pool, fix the threshold c_t, then run the accept loop
— each slot keeps redrawing from the kernel until a draw survives
``p = min(1, W/c_t)``, and the accepted draw's weight is corrected so the
target is unchanged. Under the global-kernel fast path the correction
collapses to ``max(W, c_t)`` up to one shared constant; the general path
multiplies by a Monte Carlo estimate of the normalising constant r instead.

Raw weights compare against a threshold computed from the same raw pool, so
the whole accept stage is invariant to rescaling the weights.

Every slot owns an independent RNG stream per step (derived by counter
splitting from the master seed), and the accept loop consumes each stream in
a fixed per-slot order, so results do not depend on scheduling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .kernels import BackwardKernelChoice, GlobalMixtureKernel
from .particles import (
    DegeneratePopulationError,
    ParticleSystem,
    ResampleConfig,
    effective_sample_size,
    resample_multinomial,
    weighted_quantile,
)
from .rng import substream

__all__ = [
    "CallCounter",
    "PrcPolicy",
    "PrcStarvationError",
    "StepDiagnostics",
    "TargetSequence",
    "alive_accounting",
    "estimate_r_monte_carlo",
    "prc_accept_loop",
    "run_sampler",
]

# log-density evaluator of one target: (point, rng) -> log pi_t(point)
TargetLogDensity = Callable[[np.ndarray, np.random.Generator], float]


class PrcStarvationError(RuntimeError):
    """A particle slot exhausted its attempt budget without an acceptance."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class CallCounter:
    """Mutable tally of simulator activity, snapshotted at step boundaries."""

    def __init__(self):
        self.calls = 0
        self.failures = 0


@dataclass(frozen=True)
class PrcPolicy:
    """Threshold rule, attempt budget, and normalising-constant handling.

    threshold_rule
        ``"fixed"`` uses ``threshold_value`` as c_t directly (raw-weight
        scale); ``"quantile"`` sets c_t to the threshold_value-quantile of
        the positive raw weights of the pre-PRC mutation pool.
    max_attempts
        Per-slot draw budget before the step aborts with PRC starvation;
        ``None`` means unbounded.
    r_mode
        ``"skip_constant"`` — the constant-r fast path (equal previous
        weights required when c_t > 0); ``"monte_carlo"`` — multiply each
        accepted weight by r̂(c_t)/p estimated from ``r_draws`` kernel
        samples; ``"analytic_constant"`` — multiply by ``r_constant``/p.
    """

    threshold_rule: str
    threshold_value: float
    max_attempts: int | None = 1_000_000
    r_mode: str = "skip_constant"
    r_draws: int = 100
    r_constant: float = 1.0

    def __post_init__(self):
        if self.threshold_rule not in ("fixed", "quantile"):
            raise ValueError(f"unknown threshold rule {self.threshold_rule!r}")
        if self.threshold_rule == "fixed":
            if not 0.0 <= self.threshold_value < math.inf:
                raise ValueError("fixed threshold must be finite and >= 0")
        elif not 0.0 <= self.threshold_value <= 1.0:
            raise ValueError("quantile level must be in [0, 1]")
        if self.max_attempts is not None and self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1 or None")
        if self.r_mode not in ("skip_constant", "monte_carlo", "analytic_constant"):
            raise ValueError(f"unknown r_mode {self.r_mode!r}")
        if self.r_draws < 1:
            raise ValueError("r_draws must be >= 1")
        if not 0.0 < self.r_constant <= 1.0:
            raise ValueError("r_constant must lie in (0, 1]")

    @classmethod
    def fixed(cls, c: float, **kwargs) -> "PrcPolicy":
        return cls(threshold_rule="fixed", threshold_value=c, **kwargs)

    @classmethod
    def quantile(cls, q: float, **kwargs) -> "PrcPolicy":
        return cls(threshold_rule="quantile", threshold_value=q, **kwargs)


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step health record.

    ``mean_rejections_per_particle`` is (attempts_total - N)/N by
    construction; ``epsilon`` is NaN for targets without a tolerance.
    """

    step: int
    ess: float
    weight_variance: float
    attempts_total: int
    mean_rejections_per_particle: float
    threshold_used: float
    epsilon: float = math.nan
    simulator_calls: int = 0


@dataclass(frozen=True)
class TargetSequence:
    """The distribution sequence pi_1..pi_T plus the initial sampler mu.

    ``log_density(t, x, rng)`` returns the (possibly stochastic) log of the
    unnormalised target at step t; ``-inf`` encodes a zero. ``epsilons`` is
    an optional per-step tolerance tuple recorded in diagnostics. ``counter``
    tallies simulator calls made inside the evaluator, if any.
    """

    length: int
    log_density: Callable[[int, np.ndarray, np.random.Generator], float]
    initial_sampler: Callable[[np.random.Generator], np.ndarray]
    initial_log_density: Callable[[np.ndarray], float]
    epsilons: tuple | None = None
    counter: CallCounter | None = None

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("target sequence needs at least two steps")
        if self.epsilons is not None and len(self.epsilons) != self.length:
            raise ValueError("one epsilon per step required")

    def epsilon_at(self, t: int) -> float:
        if self.epsilons is None:
            return math.nan
        return float(self.epsilons[t - 1])


def _draw_candidates(kernel, target_t, prev_logw, slots, rngs, values, raw_logw):
    """Draw one fresh candidate for each slot in ``slots`` (in place)."""
    pts = np.empty((len(slots), kernel.dim))
    logpi = np.empty(len(slots))
    for row, i in enumerate(slots):
        pts[row] = kernel.sample(rngs[i])
        logpi[row] = target_t(pts[row], rngs[i])
    log_m = kernel.log_density_batch(pts)
    values[slots] = pts
    # a zero-density target point carries zero weight no matter how small
    # the proposal density was (guards the -inf minus -inf corner)
    with np.errstate(invalid="ignore"):
        raw = prev_logw[slots] + logpi - log_m
    raw_logw[slots] = np.where(np.isneginf(logpi), -np.inf, raw)


def _step_diagnostics(system, *, step, attempts_total, threshold, epsilon=math.nan,
                      simulator_calls=0) -> StepDiagnostics:
    n = system.n
    norm_w = system.normalize().weights
    return StepDiagnostics(
        step=step,
        ess=float(1.0 / np.sum(norm_w**2)),
        weight_variance=float(np.var(norm_w)),
        attempts_total=int(attempts_total),
        mean_rejections_per_particle=(attempts_total - n) / n,
        threshold_used=threshold,
        epsilon=epsilon,
        simulator_calls=simulator_calls,
    )


def prc_accept_loop(
    prev: ParticleSystem,
    kernel: GlobalMixtureKernel,
    target_log_density: TargetLogDensity,
    policy: PrcPolicy,
    c_t: float,
    rng_streams: Sequence[np.random.Generator],
    *,
    log_threshold: float | None = None,
    first_attempts: tuple[np.ndarray, np.ndarray] | None = None,
    epsilon: float = math.nan,
    trace: dict | None = None,
) -> tuple[ParticleSystem, StepDiagnostics]:
    """Fill every slot with an accepted mutation of the previous population.

    ``first_attempts``, when given, is the (values, raw_log_weights) pool
    already drawn from ``kernel`` through the same ``rng_streams`` — each
    slot's pool draw is its first attempt, so the threshold stage costs no
    extra proposals. Raw weights include the previous weights; the final
    weight of an accepted particle is ``max(W, c_t)`` (skip_constant mode,
    up to the shared constant) or carries the r̂/p correction otherwise.

    The loop runs in vectorised rounds over still-pending slots; per-slot
    stream consumption (sample, target evaluation, acceptance uniform, …)
    matches a purely sequential implementation, so scheduling cannot change
    the result.
    """
    n = prev.n
    if len(rng_streams) != n:
        raise ValueError("one RNG stream per particle slot required")
    if log_threshold is None:
        if not 0.0 <= c_t < math.inf:
            raise ValueError("c_t must be finite and >= 0")
        log_c = math.log(c_t) if c_t > 0 else -math.inf
    else:
        if log_threshold == math.inf:
            raise ValueError("c_t must be finite")
        log_c = log_threshold
        c_t = math.exp(log_c) if log_c < 700.0 else math.inf

    prev_logw = prev.log_weights
    if policy.r_mode == "skip_constant" and log_c > -math.inf:
        finite = prev_logw[np.isfinite(prev_logw)]
        if finite.size and np.ptp(finite) > 1e-9:
            raise ValueError(
                "skip_constant requires equal previous weights when c_t > 0 "
                "(resample before the accept loop)"
            )

    values = np.empty((n, kernel.dim))
    raw_logw = np.full(n, -np.inf)
    attempts = np.ones(n, dtype=np.int64)
    if first_attempts is not None:
        pool_values, pool_logw = first_attempts
        values[:] = pool_values
        raw_logw[:] = pool_logw
    else:
        _draw_candidates(kernel, target_log_density, prev_logw,
                         np.arange(n), rng_streams, values, raw_logw)

    final_logw = np.empty(n)
    raw_at_accept = np.empty(n)
    log_r_const = math.log(policy.r_constant)
    pending = np.arange(n)
    while pending.size:
        cand = raw_logw[pending]
        if log_c == -math.inf:
            log_p = np.zeros(pending.size)  # 0/0 := 1 — everything accepted
        else:
            log_p = np.minimum(0.0, cand - log_c)
        p = np.exp(log_p)
        u = np.array([rng_streams[i].uniform() for i in pending])
        accepted = u < p

        acc = pending[accepted]
        if acc.size:
            raw_at_accept[acc] = raw_logw[acc]
            if policy.r_mode == "skip_constant":
                final_logw[acc] = np.maximum(raw_logw[acc], log_c)
            elif policy.r_mode == "analytic_constant":
                final_logw[acc] = raw_logw[acc] + log_r_const - log_p[accepted]
            else:
                for i in acc:
                    r_hat = estimate_r_monte_carlo(
                        prev.values[i], kernel, target_log_density, c_t,
                        policy.r_draws, rng_streams[i],
                        w_prev=math.exp(prev_logw[i]),
                    )
                    log_p_i = min(0.0, raw_logw[i] - log_c) if log_c > -math.inf else 0.0
                    log_r = math.log(r_hat) if r_hat > 0 else -math.inf
                    final_logw[i] = raw_logw[i] + log_r - log_p_i

        pending = pending[~accepted]
        if pending.size:
            if policy.max_attempts is not None and np.any(
                attempts[pending] >= policy.max_attempts
            ):
                stuck = int(pending[attempts[pending] >= policy.max_attempts][0])
                raise PrcStarvationError(
                    f"PRC starvation: slot {stuck} exhausted "
                    f"{policy.max_attempts} attempts at threshold {c_t:.6g}",
                    diagnostics={
                        "step": prev.step + 1,
                        "threshold_used": c_t,
                        "epsilon": epsilon,
                        "attempts_total": int(attempts.sum()),
                        "slots_pending": int(pending.size),
                    },
                )
            _draw_candidates(kernel, target_log_density, prev_logw,
                             pending, rng_streams, values, raw_logw)
            attempts[pending] += 1

    system = ParticleSystem(values=values, log_weights=final_logw, step=prev.step + 1)
    diag = _step_diagnostics(
        system, step=prev.step + 1, attempts_total=attempts.sum(),
        threshold=c_t, epsilon=epsilon,
    )
    if trace is not None:
        trace["raw_log_weights"] = raw_at_accept
        trace["final_log_weights"] = final_logw.copy()
        trace["log_threshold"] = log_c
        trace["attempts"] = attempts.copy()
    return system, diag


def estimate_r_monte_carlo(
    x_prev: np.ndarray,
    kernel: GlobalMixtureKernel,
    target_log_density: TargetLogDensity,
    c_t: float,
    m: int,
    rng: np.random.Generator,
    *,
    w_prev: float = 1.0,
) -> float:
    """Monte Carlo estimate of the PRC normalising constant r(c_t, x_prev).

    Averages min{1, W_prev * w(x*)/c_t} over m draws x* from the mutation
    kernel, where w = target/kernel under the global-kernel weight. The
    result is unbiased and lies in (0, 1]; an all-zero average (possible for
    tiny m) is returned as 0.0 with a warning.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 <= c_t < math.inf:
        raise ValueError("c_t must be finite and >= 0")
    if c_t == 0.0:
        return 1.0  # min{1, W/0} with 0/0 := 1 — the integrand is 1 everywhere
    log_c = math.log(c_t)
    log_w_prev = math.log(w_prev) if w_prev > 0 else -math.inf
    total = 0.0
    chunk = 100_000
    done = 0
    while done < m:
        size = min(chunk, m - done)
        pts = kernel.sample_batch(rng, size)
        log_m = kernel.log_density_batch(pts)
        logpi = np.array([target_log_density(pts[j], rng) for j in range(size)])
        log_w = log_w_prev + logpi - log_m
        total += float(np.sum(np.exp(np.minimum(0.0, log_w - log_c))))
        done += size
    r_hat = total / m
    if r_hat == 0.0:
        warnings.warn("estimate_r_monte_carlo returned 0 (m too small?)", RuntimeWarning)
    return r_hat


def _log_quantile_threshold(pool_logw: np.ndarray, q: float) -> float:
    """Quantile of the positive pool weights, computed under a max shift."""
    finite = pool_logw[pool_logw > -np.inf]
    if finite.size == 0:
        raise DegeneratePopulationError("all weights zero")
    shift = float(finite.max())
    c_shifted = weighted_quantile(np.exp(pool_logw - shift), q)
    return math.log(c_shifted) + shift


def run_sampler(
    targets: TargetSequence,
    kernel_builder: Callable[[ParticleSystem], GlobalMixtureKernel],
    policy: PrcPolicy,
    resample: ResampleConfig,
    n_particles: int,
    seed: int,
    *,
    backward: BackwardKernelChoice = BackwardKernelChoice.L_OPT_GLOBAL,
    keep_trace: bool = False,
) -> tuple[ParticleSystem, list[StepDiagnostics]]:
    """Run the full sampler: initialise, then select/mutate/correct per step.

    Returns the final weighted population (targeting pi_T) and one
    StepDiagnostics per step including initialisation. The optional trace
    (``keep_trace=True``) stores each step's raw/final accepted log-weights
    on the returned diagnostics list as ``diagnostics.trace``.
    """
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if backward is not BackwardKernelChoice.L_OPT_GLOBAL:
        raise ValueError(f"unsupported backward kernel {backward!r}")
    if not isinstance(resample.ess_threshold, str) and resample.ess_threshold > n_particles:
        raise ValueError("ess_threshold cannot exceed the particle count")

    counter = targets.counter
    calls_before = counter.calls if counter is not None else 0

    # initialisation: draw from mu, weight by pi_1/mu
    init_rngs = [substream(seed, 1, i) for i in range(n_particles)]
    first = targets.initial_sampler(init_rngs[0])
    values = np.empty((n_particles, np.atleast_1d(np.asarray(first, dtype=float)).size))
    values[0] = first
    for i in range(1, n_particles):
        values[i] = targets.initial_sampler(init_rngs[i])
    logw = np.array(
        [
            targets.log_density(1, values[i], init_rngs[i])
            - targets.initial_log_density(values[i])
            for i in range(n_particles)
        ]
    )
    system = ParticleSystem(values=values, log_weights=logw, step=1)

    sim_calls = (counter.calls - calls_before) if counter is not None else 0
    diagnostics = [
        _step_diagnostics(
            system, step=1, attempts_total=n_particles, threshold=math.nan,
            epsilon=targets.epsilon_at(1), simulator_calls=sim_calls,
        )
    ]
    traces: list[dict] = []

    for t in range(2, targets.length + 1):
        calls_before = counter.calls if counter is not None else 0
        norm = system.normalize()
        if resample.ess_threshold == "always" or (
            effective_sample_size(norm) < float(resample.ess_threshold)
        ):
            selected = resample_multinomial(norm, substream(seed, t, n_particles))
        else:
            selected = norm
        kernel = kernel_builder(selected)
        slot_rngs = [substream(seed, t, i) for i in range(n_particles)]

        def target_t(x, rng, _t=t):
            return targets.log_density(_t, x, rng)

        if policy.threshold_rule == "quantile":
            pool_values = np.empty((n_particles, kernel.dim))
            pool_logw = np.full(n_particles, -np.inf)
            _draw_candidates(kernel, target_t, selected.log_weights,
                             np.arange(n_particles), slot_rngs, pool_values, pool_logw)
            log_c = _log_quantile_threshold(pool_logw, policy.threshold_value)
            first_attempts = (pool_values, pool_logw)
        else:
            log_c = (
                math.log(policy.threshold_value)
                if policy.threshold_value > 0
                else -math.inf
            )
            first_attempts = None

        trace: dict | None = {} if keep_trace else None
        system, diag = prc_accept_loop(
            selected, kernel, target_t, policy, math.exp(log_c), slot_rngs,
            log_threshold=log_c, first_attempts=first_attempts,
            epsilon=targets.epsilon_at(t), trace=trace,
        )
        if counter is not None:
            diag = replace(diag, simulator_calls=counter.calls - calls_before)
        diagnostics.append(diag)
        if keep_trace:
            traces.append(trace)

    if keep_trace:
        diagnostics = _TracedList(diagnostics, traces)
    return system, diagnostics


class _TracedList(list):
    """Diagnostics list that also carries per-step accept-loop traces."""

    def __init__(self, items, traces):
        super().__init__(items)
        self.traces = traces


def alive_accounting(diag):
    """Per-step attempts ratios N_{c_t}/N and their dispersion.

    ``diag`` is either one run's diagnostics list or a list of such lists
    (replications). The ratio equals 1 + mean rejections per particle; the
    dispersion is the across-replication standard deviation per step (NaN
    for a single run).
    """
    if len(diag) == 0:
        raise ValueError("at least one step required")
    runs = diag if isinstance(diag[0], (list, tuple)) else [diag]
    ratios = np.array(
        [[1.0 + d.mean_rejections_per_particle for d in run] for run in runs]
    )
    if ratios.shape[0] > 1:
        dispersion = ratios.std(axis=0, ddof=1)
    else:
        dispersion = np.full(ratios.shape[1], np.nan)
    return {
        "ratios": ratios,
        "per_step_mean": ratios.mean(axis=0),
        "per_step_dispersion": dispersion,
    }
