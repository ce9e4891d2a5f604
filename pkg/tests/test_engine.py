import math

import numpy as np
import pytest
from scipy import integrate, stats

from smcprc import (
    GaussianMixtureKernel,
    ParticleSystem,
    PrcPolicy,
    PrcStarvationError,
    ResampleConfig,
    TargetSequence,
    alive_accounting,
    estimate_r_monte_carlo,
    prc_accept_loop,
    run_sampler,
    substream,
)

N = 64


def equal_weight_system(rng, n=N, spread=1.0):
    values = rng.normal(size=(n, 1), scale=spread)
    return ParticleSystem(
        values=values, log_weights=np.full(n, -math.log(n)), step=1, normalized=True
    )


def slot_streams(seed, t, n=N):
    return [substream(seed, t, i) for i in range(n)]


def log_std_normal(x, _rng=None):
    x = float(np.asarray(x).reshape(-1)[0])
    return -0.5 * x * x - 0.5 * math.log(2 * math.pi)


WIDE_KERNEL = GaussianMixtureKernel([[0.0]], [1.0], tau_sq=4.0)


class TestPrcPolicy:
    def test_fixed_infinite_threshold_rejected(self):
        with pytest.raises(ValueError):
            PrcPolicy.fixed(math.inf)

    def test_quantile_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError):
            PrcPolicy.quantile(1.2)

    def test_unbounded_attempts_allowed(self):
        assert PrcPolicy.fixed(0.0, max_attempts=None).max_attempts is None

    def test_monte_carlo_draws_validated(self):
        with pytest.raises(ValueError):
            PrcPolicy.fixed(1.0, r_mode="monte_carlo", r_draws=0)

    def test_unknown_r_mode(self):
        with pytest.raises(ValueError):
            PrcPolicy.fixed(1.0, r_mode="exact")


class TestPrcAcceptLoop:
    def test_zero_threshold_accepts_everything_unchanged(self, rng):
        prev = equal_weight_system(rng)
        trace = {}
        out, diag = prc_accept_loop(
            prev, WIDE_KERNEL, log_std_normal, PrcPolicy.fixed(0.0), 0.0,
            slot_streams(11, 2), trace=trace,
        )
        assert diag.attempts_total == N
        assert diag.mean_rejections_per_particle == 0.0
        # weights pass through untouched: final == raw
        np.testing.assert_array_equal(trace["final_log_weights"], trace["raw_log_weights"])

    def test_threshold_at_min_weight_rejects_only_zeros(self, rng):
        # hard-indicator target: raw weight is either positive or exactly zero
        def log_indicator(x, _rng=None):
            return 0.0 if abs(float(np.asarray(x).reshape(-1)[0])) < 1.0 else -math.inf

        prev = equal_weight_system(rng)
        streams = slot_streams(23, 2)
        pool_values = np.empty((N, 1))
        pool_logw = np.empty(N)
        for i, stream in enumerate(streams):
            x = WIDE_KERNEL.sample(stream)
            pool_values[i] = x
            pool_logw[i] = (
                prev.log_weights[i] + log_indicator(x) - WIDE_KERNEL.log_density(x)
            )
        positive = np.isfinite(pool_logw)
        assert 0 < positive.sum() < N  # fixture sanity: both kinds occur
        c = float(np.exp(pool_logw[positive].min()))

        trace = {}
        out, diag = prc_accept_loop(
            prev, WIDE_KERNEL, log_indicator, PrcPolicy.fixed(c), c, streams,
            first_attempts=(pool_values, pool_logw), trace=trace,
        )
        # min{1, W/c} = 1 for every positive pool weight, so those slots
        # accept their first attempt; only zero-weight draws get rejected
        assert np.all(trace["attempts"][positive] == 1)
        assert np.all(trace["attempts"][~positive] >= 2)
        assert np.all(np.isfinite(out.log_weights))
        assert diag.attempts_total >= N

    def test_final_weight_is_max_of_raw_and_threshold(self, rng):
        prev = equal_weight_system(rng)
        c = 0.02
        trace = {}
        out, diag = prc_accept_loop(
            prev, WIDE_KERNEL, log_std_normal, PrcPolicy.fixed(c), c,
            slot_streams(7, 2), trace=trace,
        )
        expected = np.maximum(trace["raw_log_weights"], math.log(c))
        np.testing.assert_allclose(out.log_weights, expected, rtol=0, atol=1e-12)
        assert diag.threshold_used == c

    def test_skip_constant_requires_equal_previous_weights(self, rng):
        values = rng.normal(size=(4, 1))
        prev = ParticleSystem(
            values=values, log_weights=np.log([0.1, 0.2, 0.3, 0.4]), step=1
        )
        with pytest.raises(ValueError, match="equal previous weights"):
            prc_accept_loop(
                prev, WIDE_KERNEL, log_std_normal, PrcPolicy.fixed(0.5), 0.5,
                slot_streams(3, 2, 4),
            )
        # c = 0 needs no constant-r argument, so unequal weights are fine
        prc_accept_loop(
            prev, WIDE_KERNEL, log_std_normal, PrcPolicy.fixed(0.0), 0.0,
            slot_streams(3, 2, 4),
        )

    def test_starvation_error_carries_diagnostics(self, rng):
        prev = equal_weight_system(rng, n=8)

        def log_zero(x, _rng=None):
            return -math.inf

        with pytest.raises(PrcStarvationError, match="PRC starvation") as excinfo:
            prc_accept_loop(
                prev, WIDE_KERNEL, log_zero, PrcPolicy.fixed(1.0, max_attempts=5), 1.0,
                slot_streams(5, 2, 8),
            )
        info = excinfo.value.diagnostics
        assert info["slots_pending"] == 8
        assert info["threshold_used"] == 1.0

    def test_monte_carlo_mode_matches_skip_constant_when_r_is_one(self, rng):
        # target == kernel, so every incremental weight is exactly 1 and
        # r-hat = E[min(1, W_prev / c)] = 1 for c below the weight floor
        prev = equal_weight_system(rng, n=16)
        target = lambda x, _rng=None: float(WIDE_KERNEL.log_density(np.atleast_1d(x)))
        c = 0.5 / 16
        out_mc, _ = prc_accept_loop(
            prev, WIDE_KERNEL, target,
            PrcPolicy.fixed(c, r_mode="monte_carlo", r_draws=8), c,
            slot_streams(9, 2, 16),
        )
        out_skip, _ = prc_accept_loop(
            prev, WIDE_KERNEL, target, PrcPolicy.fixed(c), c, slot_streams(9, 2, 16),
        )
        np.testing.assert_allclose(out_mc.log_weights, out_skip.log_weights, atol=1e-12)


class TestEstimateR:
    def test_exactly_one_when_threshold_below_weight_floor(self, rng):
        # target == kernel: incremental weight is identically 1
        target = lambda x, _rng=None: float(WIDE_KERNEL.log_density(np.atleast_1d(x)))
        r = estimate_r_monte_carlo(np.array([0.0]), WIDE_KERNEL, target, 0.5, 500, rng)
        assert r == 1.0

    def test_zero_threshold_is_one_by_convention(self, rng):
        r = estimate_r_monte_carlo(np.array([0.0]), WIDE_KERNEL, log_std_normal, 0.0, 10, rng)
        assert r == 1.0

    def test_single_draw_in_unit_interval(self, rng):
        r = estimate_r_monte_carlo(np.array([0.0]), WIDE_KERNEL, log_std_normal, 0.7, 1, rng)
        assert 0.0 < r <= 1.0

    def test_matches_quadrature(self, rng):
        # r(c) = E_M[min(1, w(x)/c)] for the N(0,1)-target / N(0,4)-kernel pair
        c = 1.3

        def integrand(x):
            m = stats.norm.pdf(x, scale=2.0)
            w = stats.norm.pdf(x) / m
            return m * min(1.0, w / c)

        expected, _ = integrate.quad(integrand, -12, 12, limit=400)
        r = estimate_r_monte_carlo(
            np.array([0.0]), WIDE_KERNEL, log_std_normal, c, 200_000, rng
        )
        assert r == pytest.approx(expected, abs=4e-3)


def two_step_targets(n_steps=2):
    return TargetSequence(
        length=n_steps,
        log_density=lambda t, x, rng: log_std_normal(x),
        initial_sampler=lambda rng: rng.normal(size=1),
        initial_log_density=log_std_normal,
    )


class TestRunSampler:
    def test_noop_sequence_preserves_weighted_mean(self):
        system, diag = run_sampler(
            two_step_targets(), lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
            PrcPolicy.fixed(0.0), ResampleConfig(ess_threshold="always"),
            n_particles=400, seed=99,
        )
        norm = system.normalize()
        mean = norm.weighted_mean()[0]
        se = math.sqrt(norm.weighted_var()[0] / 400)
        # pi_2 == pi_1 == mu == N(0,1): the weighted mean stays at 0
        assert abs(mean) < 3 * max(se, 1e-6) + 3 / math.sqrt(400)
        assert len(diag) == 2
        assert diag[0].attempts_total == 400

    def test_bitwise_determinism(self):
        kb = lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0)
        policy = PrcPolicy.quantile(0.9)
        args = (two_step_targets(4), kb, policy, ResampleConfig(ess_threshold="always"))
        sys_a, diag_a = run_sampler(*args, n_particles=128, seed=7)
        sys_b, diag_b = run_sampler(*args, n_particles=128, seed=7)
        np.testing.assert_array_equal(sys_a.values, sys_b.values)
        np.testing.assert_array_equal(sys_a.log_weights, sys_b.log_weights)
        assert diag_a == diag_b

    def test_quantile_threshold_recorded_and_attempts_accounted(self):
        system, diag = run_sampler(
            two_step_targets(3), lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
            PrcPolicy.quantile(0.95), ResampleConfig(ess_threshold="always"),
            n_particles=256, seed=3,
        )
        for d in diag[1:]:
            assert d.attempts_total >= 256
            assert d.mean_rejections_per_particle == pytest.approx(
                (d.attempts_total - 256) / 256
            )
            assert math.isfinite(d.threshold_used)
        assert 1.0 <= diag[-1].ess <= 256.0

    def test_raw_final_pairs_satisfy_max_structure(self):
        system, diag = run_sampler(
            two_step_targets(3), lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
            PrcPolicy.quantile(0.9), ResampleConfig(ess_threshold="always"),
            n_particles=128, seed=21, keep_trace=True,
        )
        assert len(diag.traces) == 2
        for trace in diag.traces:
            expected = np.maximum(trace["raw_log_weights"], trace["log_threshold"])
            np.testing.assert_allclose(trace["final_log_weights"], expected, atol=1e-12)

    def test_conditional_resampling_guard(self):
        # a target narrower than mu gives unequal initial weights; skipping
        # the resample then makes the constant-r fast path invalid
        def log_narrow(x, _rng=None):
            x = float(np.asarray(x).reshape(-1)[0])
            return -2.0 * x * x

        targets = TargetSequence(
            length=2,
            log_density=lambda t, x, rng: log_narrow(x),
            initial_sampler=lambda rng: rng.normal(size=1),
            initial_log_density=log_std_normal,
        )
        with pytest.raises(ValueError, match="equal previous weights"):
            run_sampler(
                targets, lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
                PrcPolicy.quantile(0.5), ResampleConfig(ess_threshold=1.0),
                n_particles=64, seed=5,
            )

    def test_ess_threshold_cannot_exceed_n(self):
        with pytest.raises(ValueError):
            run_sampler(
                two_step_targets(), lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
                PrcPolicy.fixed(0.0), ResampleConfig(ess_threshold=100.0),
                n_particles=10, seed=5,
            )


class TestAliveAccounting:
    def test_no_rejections_gives_unit_ratios(self):
        _, diag = run_sampler(
            two_step_targets(3), lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
            PrcPolicy.fixed(0.0), ResampleConfig(ess_threshold="always"),
            n_particles=64, seed=13,
        )
        acct = alive_accounting(diag)
        np.testing.assert_array_equal(acct["ratios"], np.ones((1, 3)))
        assert np.all(np.isnan(acct["per_step_dispersion"]))

    def test_replicated_runs_report_dispersion(self):
        runs = []
        for rep in range(6):
            _, diag = run_sampler(
                two_step_targets(3),
                lambda s: GaussianMixtureKernel(s.values, s.weights, 1.0),
                PrcPolicy.quantile(0.9), ResampleConfig(ess_threshold="always"),
                n_particles=64, seed=100 + rep,
            )
            runs.append(diag)
        acct = alive_accounting(runs)
        assert acct["ratios"].shape == (6, 3)
        assert np.all(acct["ratios"] >= 1.0)
        assert np.all(acct["per_step_dispersion"][1:] >= 0.0)

    def test_tighter_tolerance_raises_ratios(self):
        # paired runs: the ratio (attempts per slot) grows as epsilon shrinks
        from smcprc.models import ToyConfig, run_toy

        cfgs = [
            ToyConfig(n_particles=200, schedule=(math.inf, 2.0, eps)) for eps in (1.0, 0.5)
        ]
        ratios = []
        for cfg in cfgs:
            _, diag = run_toy(cfg, PrcPolicy.quantile(0.5), seed=17)
            ratios.append(alive_accounting(diag)["ratios"][0, -1])
        assert ratios[1] > ratios[0]
