import math

import numpy as np
import pytest
from scipy import stats

from smcprc import SimulatorFailure, substream
from smcprc.models.chain_ladder import (
    DOLLARS_PER_UNIT,
    SIGMA_REPORT_SCALE,
    TABLE1_ANNUAL,
    BootstrapDraw,
    ChainLadderParams,
    ChainLadderPriors,
    ClaimsTriangle,
    bootstrap_simulate,
    calibrate_final_tolerance,
    chain_ladder_predict,
    claims_bindings,
    claims_kernel_builder,
    claims_mu_sampler,
    claims_schedule,
    classical_chain_ladder,
    conditional_residuals,
    observed_summary_vector,
    pilot_covariance,
    reconstruct_triangle,
)
from smcprc import abc_density_estimate

# Independently frozen estimates for the ten-year table (triangle units).
FROZEN_FACTORS = np.array([
    1.4925359089, 1.0777602807, 1.0228731487, 1.0148409362, 1.0069738914,
    1.0051457772, 1.0010803957, 1.0010468006, 1.0014204600,
])
FROZEN_SIGMA_X100 = np.array([
    135.252868, 33.802815, 15.759640, 19.846650, 9.336236,
    2.001022, 0.823162, 0.219437, 0.058497,
])
# Rounded values quoted in the reserving literature for the same table.
PUBLISHED_FACTORS_4DP = np.array(
    [1.4925, 1.0778, 1.0229, 1.0148, 1.0070, 1.0051, 1.0011, 1.0010, 1.0014]
)
PUBLISHED_SIGMA = np.array(
    [135.253, 33.803, 15.760, 19.847, 9.336, 2.001, 0.823, 0.219, 0.059]
)
PUBLISHED_TOTAL_RESERVE = 6_047_061.0
PUBLISHED_ROW9_COMPLETED = np.array([
    8_470_989, 9_129_696, 9_338_521, 9_477_113, 9_543_206,
    9_592_313, 9_602_676, 9_612_728, 9_626_383,
])


def small_triangle():
    return ClaimsTriangle(cumulative=np.array([
        [100.0, 160.0, 176.0],
        [110.0, 171.0, np.nan],
        [120.0, np.nan, np.nan],
    ]))


class TestClaimsTriangle:
    def test_from_annual_accumulates(self, table1):
        first = TABLE1_ANNUAL[0]
        assert table1.cumulative[0, 0] == first[0]
        assert table1.cumulative[0, 1] == pytest.approx(first[0] + first[1])
        assert table1.cumulative[0, 9] == pytest.approx(sum(first))

    def test_latest_diagonal(self, table1):
        diag = table1.latest_diagonal()
        assert diag.shape == (10,)
        assert diag[9] == pytest.approx(567.5568)
        assert diag[0] == pytest.approx(sum(TABLE1_ANNUAL[0]))

    def test_observed_values_row_major(self):
        tri = small_triangle()
        np.testing.assert_allclose(
            tri.observed_values(), [100.0, 160.0, 176.0, 110.0, 171.0, 120.0]
        )

    def test_unobserved_region_masked(self):
        filled = np.array([[1.0, 2.0], [3.0, 99.0]])
        tri = ClaimsTriangle(cumulative=filled)
        assert np.isnan(tri.cumulative[1, 1])

    def test_rejects_nonpositive_observed(self):
        with pytest.raises(ValueError, match="accident year 1"):
            ClaimsTriangle(cumulative=np.array([[1.0, 2.0], [0.0, np.nan]]))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            ClaimsTriangle(cumulative=np.ones((2, 3)))

    def test_from_annual_checks_row_lengths(self):
        with pytest.raises(ValueError, match="accident year 1: expected 1 annual"):
            ClaimsTriangle.from_annual([[1.0, 2.0], [1.0, 1.0]])

    def test_csv_round_trip(self, table1, tmp_path):
        path = tmp_path / "triangle.csv"
        table1.to_csv(path)
        again = ClaimsTriangle.from_csv(path)
        np.testing.assert_array_equal(
            np.isnan(again.cumulative), np.isnan(table1.cumulative)
        )
        np.testing.assert_allclose(
            again.observed_values(), table1.observed_values(), rtol=0, atol=0
        )

    def test_from_csv_rejects_out_of_order_years(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("accident_year,dev_0,dev_1\n1,1.0\n0,1.0,2.0\n")
        with pytest.raises(ValueError, match="in order"):
            ClaimsTriangle.from_csv(path)


class TestClassicalEstimates:
    def test_factors_match_column_sum_ratio(self, table1):
        # hand computation of the first factor straight from the data
        c = table1.cumulative
        by_hand = sum(c[i, 1] for i in range(9)) / sum(c[i, 0] for i in range(9))
        params = classical_chain_ladder(table1)
        assert params.f[0] == pytest.approx(by_hand, rel=1e-14)

    def test_factors_frozen_and_published(self, table1):
        params = classical_chain_ladder(table1)
        np.testing.assert_allclose(params.f, FROZEN_FACTORS, atol=5e-11)
        np.testing.assert_allclose(np.round(params.f, 4), PUBLISHED_FACTORS_4DP)

    def test_sigma_frozen_and_published(self, table1):
        params = classical_chain_ladder(table1)
        reported = params.sigma * SIGMA_REPORT_SCALE
        np.testing.assert_allclose(reported, FROZEN_SIGMA_X100, atol=5e-6)
        # the extrapolated tail lands at 0.0585, printed elsewhere as 0.059
        np.testing.assert_allclose(reported[:-1], PUBLISHED_SIGMA[:-1], atol=5e-4)
        assert abs(reported[-1] - PUBLISHED_SIGMA[-1]) < 1e-3

    def test_tail_variance_is_the_minimum_rule(self, table1):
        params = classical_chain_ladder(table1)
        s2 = (params.sigma * SIGMA_REPORT_SCALE) ** 2
        expected = min(s2[7] ** 2 / s2[6], s2[6], s2[7])
        assert s2[8] == pytest.approx(expected, rel=1e-12)

    def test_two_year_triangle_has_no_sigma(self):
        tri = ClaimsTriangle(cumulative=np.array([[1.0, 2.0], [1.5, np.nan]]))
        params = classical_chain_ladder(tri)
        assert params.f[0] == pytest.approx(2.0)
        assert params.sigma is None

    def test_three_year_triangle_repeats_last_sigma(self):
        params = classical_chain_ladder(small_triangle())
        assert params.sigma is not None
        assert params.sigma[1] == pytest.approx(params.sigma[0])

    def test_param_vector_round_trip(self, table1):
        params = classical_chain_ladder(table1)
        again = ChainLadderParams.from_vector(params.as_vector())
        np.testing.assert_array_equal(again.f, params.f)
        np.testing.assert_array_equal(again.sigma, params.sigma)


class TestPrediction:
    def test_total_reserve_matches_published(self, table1):
        pred = chain_ladder_predict(table1, classical_chain_ladder(table1))
        dollars = pred.total_reserve * DOLLARS_PER_UNIT
        assert dollars == pytest.approx(6_047_058.45, abs=0.5)
        assert dollars == pytest.approx(PUBLISHED_TOTAL_RESERVE, rel=5e-4)

    def test_latest_year_completion_matches_published(self, table1):
        pred = chain_ladder_predict(table1, classical_chain_ladder(table1))
        dollars = pred.completed[9, 1:] * DOLLARS_PER_UNIT
        np.testing.assert_allclose(dollars, PUBLISHED_ROW9_COMPLETED, atol=1.0)
        assert pred.reserves[9] * DOLLARS_PER_UNIT == pytest.approx(3_950_814, abs=1.0)

    def test_oldest_year_has_zero_reserve(self, table1):
        pred = chain_ladder_predict(table1, classical_chain_ladder(table1))
        assert pred.reserves[0] == 0.0

    def test_unit_factors_leave_everything_flat(self, table1):
        idx = table1.final_index
        pred = chain_ladder_predict(table1, ChainLadderParams(f=np.ones(idx)))
        np.testing.assert_allclose(pred.reserves, 0.0, atol=1e-12)
        assert pred.total_reserve == pytest.approx(0.0, abs=1e-10)


class TestResiduals:
    def test_column_major_layout_by_hand(self):
        tri = small_triangle()
        params = ChainLadderParams(f=np.array([1.5, 1.1]), sigma=np.array([2.0, 1.0]))
        res = conditional_residuals(tri, params)
        c = tri.cumulative
        expected = [
            (c[0, 1] - 1.5 * c[0, 0]) / (2.0 * math.sqrt(c[0, 0])),
            (c[1, 1] - 1.5 * c[1, 0]) / (2.0 * math.sqrt(c[1, 0])),
            (c[0, 2] - 1.1 * c[0, 1]) / (1.0 * math.sqrt(c[0, 1])),
        ]
        np.testing.assert_allclose(res, expected, rtol=1e-14)

    def test_table_has_forty_five_residuals(self, table1):
        res = conditional_residuals(table1, classical_chain_ladder(table1))
        assert res.shape == (45,)

    def test_inversion_round_trip(self, table1):
        params = classical_chain_ladder(table1)
        res = conditional_residuals(table1, params)
        rebuilt, used = reconstruct_triangle(table1, params, res)
        np.testing.assert_allclose(
            rebuilt.observed_values(), table1.observed_values(), rtol=1e-9
        )
        np.testing.assert_array_equal(used, res)

    def test_vanishing_noise_recovers_factor_recursion(self, table1):
        params = classical_chain_ladder(table1)
        quiet = ChainLadderParams(f=params.f, sigma=np.full(9, 1e-12))
        rebuilt, _ = reconstruct_triangle(table1, quiet, np.ones(45))
        c = rebuilt.cumulative
        for i in range(9):
            for j in range(9 - i):
                assert c[i, j + 1] == pytest.approx(c[i, j] * params.f[j], rel=1e-9)

    def test_estimator_recovers_truth_on_synthetic_triangles(self, table1):
        truth = classical_chain_ladder(table1)
        f_hats = []
        for k in range(300):
            eps = substream(99, k).standard_normal(45)
            tri_k, _ = reconstruct_triangle(table1, truth, eps)
            f_hats.append(classical_chain_ladder(tri_k).f)
        f_hats = np.array(f_hats)
        se = f_hats.std(axis=0, ddof=1) / math.sqrt(len(f_hats))
        assert np.all(np.abs(f_hats.mean(axis=0) - truth.f) < 4.5 * se)


class TestReconstructPositivity:
    def setup_method(self):
        self.tri = small_triangle()
        self.params = ChainLadderParams(
            f=np.array([1.0, 1.0]), sigma=np.array([1.0, 1.0])
        )

    def test_no_pool_failure(self):
        bad = np.array([-100.0, 0.0, 0.0])
        with pytest.raises(SimulatorFailure, match="no redraw pool"):
            reconstruct_triangle(self.tri, self.params, bad)

    def test_redraw_replaces_offending_residual(self):
        bad = np.array([-100.0, 0.0, 0.0])
        rebuilt, used = reconstruct_triangle(
            self.tri, self.params, bad,
            redraw_pool=np.array([0.5]), rng=substream(1, 0),
        )
        assert used[0] == 0.5
        np.testing.assert_array_equal(used[1:], bad[1:])
        assert np.all(rebuilt.observed_values() > 0)

    def test_retry_budget_exhaustion(self):
        bad = np.array([-100.0, 0.0, 0.0])
        with pytest.raises(SimulatorFailure, match="retry budget"):
            reconstruct_triangle(
                self.tri, self.params, bad,
                redraw_pool=np.array([-100.0]), rng=substream(1, 0), retry_budget=3,
            )


class TestBootstrap:
    def test_summary_layout(self, table1):
        params = classical_chain_ladder(table1)
        draw = bootstrap_simulate(table1, params, substream(7, 0))
        s = draw.summary()
        assert s.shape == (57,)
        np.testing.assert_array_equal(s[:55], draw.triangle.observed_values())
        assert s[55] == draw.residual_mean
        assert s[56] == draw.residual_sd

    def test_deterministic_given_stream(self, table1):
        params = classical_chain_ladder(table1)
        a = bootstrap_simulate(table1, params, substream(7, 3))
        b = bootstrap_simulate(table1, params, substream(7, 3))
        np.testing.assert_array_equal(a.summary(), b.summary())

    def test_first_column_conditioned_on_data(self, table1):
        params = classical_chain_ladder(table1)
        draw = bootstrap_simulate(table1, params, substream(7, 1))
        np.testing.assert_array_equal(
            draw.triangle.cumulative[:, 0], table1.cumulative[:, 0]
        )

    def test_residual_moments_hover_near_standard(self, table1):
        params = classical_chain_ladder(table1)
        means = np.array([
            bootstrap_simulate(table1, params, substream(11, k)).residual_mean
            for k in range(200)
        ])
        # resampled from a mean-zero-ish pool of 45: loose standard-error band
        assert abs(means.mean()) < 4 / math.sqrt(200 * 45)

    def test_observed_summary_vector_appends_reference_moments(self, table1):
        obs = observed_summary_vector(table1)
        assert obs.shape == (57,)
        assert obs[55] == 0.0 and obs[56] == 1.0
        np.testing.assert_array_equal(obs[:55], table1.observed_values())


class TestPriors:
    def test_hyperparameters_from_estimates(self, table1):
        params = classical_chain_ladder(table1)
        priors = ChainLadderPriors.from_estimates(params, cov=10.0)
        np.testing.assert_allclose(priors.f_shape, 0.01)
        np.testing.assert_allclose(priors.f_scale, params.f * 100.0)
        np.testing.assert_allclose(priors.s_a, 2.01)
        np.testing.assert_allclose(priors.s_b, params.sigma * 1.01)
        assert priors.dim == 18

    def test_means_recover_estimates(self, table1):
        params = classical_chain_ladder(table1)
        priors = ChainLadderPriors.from_estimates(params, cov=10.0)
        np.testing.assert_allclose(priors.means(), params.as_vector(), rtol=1e-12)

    def test_sample_means_converge(self, table1):
        params = classical_chain_ladder(table1)
        priors = ChainLadderPriors.from_estimates(params, cov=1.0)
        draws = np.array([priors.sample(substream(3, k)) for k in range(20_000)])
        se = draws.std(axis=0, ddof=1) / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - priors.means()) < 4.5 * se)

    def test_log_density_matches_reference_distributions(self, table1):
        params = classical_chain_ladder(table1)
        priors = ChainLadderPriors.from_estimates(params, cov=2.0)
        x = priors.means() * 0.9
        k = 9
        expected = stats.gamma.logpdf(x[:k], priors.f_shape, scale=priors.f_scale).sum()
        expected += stats.invgamma.logpdf(x[k:], priors.s_a, scale=priors.s_b).sum()
        assert priors.log_density(x) == pytest.approx(expected, rel=1e-12)

    def test_density_zero_off_support(self, table1):
        priors = ChainLadderPriors.from_estimates(classical_chain_ladder(table1))
        x = priors.means()
        x[0] = -1.0
        assert priors.density(x) == 0.0

    def test_inverse_gamma_shape_must_give_finite_mean(self):
        with pytest.raises(ValueError, match="exceed 1"):
            ChainLadderPriors(
                f_shape=np.array([1.0]), f_scale=np.array([1.0]),
                s_a=np.array([0.5]), s_b=np.array([1.0]),
            )

    def test_mu_sampler_centres_on_estimates(self, table1):
        params = classical_chain_ladder(table1)
        mu = claims_mu_sampler(params, mu_cov=0.5)
        draws = np.array([mu.sample(substream(4, k)) for k in range(20_000)])
        se = draws.std(axis=0, ddof=1) / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - params.as_vector()) < 4.5 * se)
        assert mu.log_density(-np.ones(18)) == -math.inf


class TestPilotCalibration:
    def test_pilot_covariance_shape_and_floor(self, table1):
        params = classical_chain_ladder(table1)
        cov = pilot_covariance(
            table1, lambda _rng: params, n_pilot=100, seed=5, floor=1e-12
        )
        assert cov.shape == (57,)
        assert np.all(cov >= 1e-12)
        assert np.all(np.isfinite(cov))

    def test_final_tolerance_positive_and_floored(self, table1):
        params = classical_chain_ladder(table1)
        cov = pilot_covariance(table1, lambda _rng: params, n_pilot=100, seed=5)
        eps = calibrate_final_tolerance(table1, params, cov, n_pilot=100, seed=5)
        assert eps >= 1e-5
        huge_floor = calibrate_final_tolerance(
            table1, params, cov, n_pilot=100, seed=5, floor=1e6
        )
        assert huge_floor == 1e6

    def test_distance_scale_invariance(self, table1):
        # money units cancel: rescaling the data rescales the pilot
        # covariance so distances are unchanged
        from smcprc.models.chain_ladder import claims_summary_and_distance

        def pipeline(tri, seed=13):
            params = classical_chain_ladder(tri)
            cov = pilot_covariance(tri, lambda _rng: params, n_pilot=150, seed=seed)
            draw = bootstrap_simulate(tri, params, substream(seed, 5))
            return claims_summary_and_distance(tri, draw, cov)

        scaled = ClaimsTriangle(cumulative=table1.cumulative * 40.0)
        assert pipeline(table1) == pytest.approx(pipeline(scaled), rel=1e-8)

    def test_schedule_shape(self):
        sched = claims_schedule(0.05, length=22)
        eps = list(sched)
        assert len(eps) == 22
        assert eps[0] == math.inf
        assert eps[1] == pytest.approx(10.0)
        assert eps[-1] == pytest.approx(0.05)
        ratios = np.diff(np.log(eps[1:]))
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            claims_schedule(11.0)
        with pytest.raises(ValueError):
            claims_schedule(0.5, length=2)


class TestBindings:
    def test_estimate_at_loose_tolerance_equals_prior(self, table1):
        params = classical_chain_ladder(table1)
        priors = ChainLadderPriors.from_estimates(params)
        cov = pilot_covariance(table1, lambda _rng: params, n_pilot=80, seed=2)
        target = claims_bindings(table1, priors, cov)
        x = params.as_vector()
        value = abc_density_estimate(target, x, 1e9, substream(6, 0))
        assert value == pytest.approx(priors.density(x), rel=1e-12)
        assert target.counter.calls == 1

    def test_kernel_builder_bandwidth(self):
        from smcprc import ParticleSystem
        from scipy.special import logsumexp

        values = np.array([[2.0, 4.0], [3.0, 5.0], [4.0, 7.0], [5.0, 9.0]])
        weights = np.full(4, 0.25)
        system = ParticleSystem(
            values=values, log_weights=np.log(weights), step=1
        ).normalize()
        kernel = claims_kernel_builder()(system)

        rate = 4 ** (-2.0 / (2 + 4.0))
        # equal weights put the cumulative grid at .25/.5/.75/1, so the
        # quartiles land exactly on the first and third sorted values
        iqr = np.array([4.0 - 2.0, 7.0 - 4.0])
        var = (iqr / 1.349) ** 2 * rate
        shape = values**2 / var
        scale = var / values
        x = np.array([2.2, 5.1])
        per_component = stats.gamma.logpdf(x, shape, scale=scale).sum(axis=1)
        expected = logsumexp(per_component, b=weights)
        assert kernel.log_density(x) == pytest.approx(expected, rel=1e-12)

    def test_kernel_builder_ignores_stray_outlier(self):
        from smcprc import ParticleSystem

        # 49 particles tightly bunched plus one runaway: the robust spread
        # must not blow up with the outlier's squared deviation
        rng = np.random.default_rng(11)
        bulk = 2.0 + 0.01 * rng.standard_normal((49, 1))
        values = np.vstack([bulk, [[400.0]]])
        system = ParticleSystem(
            values=values, log_weights=np.zeros(50), step=1
        ).normalize()
        kernel = claims_kernel_builder()(system)
        assert kernel.variance.max() < 1.0

    def test_kernel_builder_variance_fallback_for_degenerate_iqr(self):
        from smcprc import ParticleSystem

        # a heavy repeated value pins both quartiles, collapsing the IQR
        # to zero; the bandwidth then falls back to the weighted variance
        values = np.array([[2.0]] * 8 + [[2.5]])
        weights = np.array([0.96 / 8] * 8 + [0.04])
        system = ParticleSystem(
            values=values, log_weights=np.log(weights), step=1
        ).normalize()
        kernel = claims_kernel_builder()(system)

        mean = weights @ values[:, 0]
        var = weights @ (values[:, 0] - mean) ** 2
        expected = var * 9 ** (-2.0 / (1 + 4.0))
        assert np.allclose(kernel.variance, expected)
