import math

import numpy as np
import pytest
from scipy import stats

from fcsjm import compute_metrics, rubin_pool


class TestRubinPool:
    def test_two_multiple_hand_example(self):
        # textbook arithmetic: Qbar = 2, B = 2, T = 1 + (1 + 1/2) * 2 = 4
        pooled = rubin_pool([1.0, 3.0], [1.0, 1.0])
        assert pooled.estimate == 2.0
        assert pooled.within_var == 1.0
        assert pooled.between_var == 2.0
        assert pooled.total_var == 4.0
        assert pooled.std_error == 2.0
        assert pooled.frac_missing_info == 0.75
        # classical df = (m - 1) / lambda^2
        assert pooled.df == pytest.approx(1.0 / 0.75**2)

    def test_zero_between_variance(self):
        pooled = rubin_pool([1.5, 1.5, 1.5], [0.04, 0.04, 0.04])
        assert pooled.between_var == 0.0
        assert pooled.frac_missing_info == 0.0
        assert math.isinf(pooled.df)
        # normal interval when df is infinite
        z = stats.norm.ppf(0.975)
        assert pooled.ci_low == pytest.approx(1.5 - z * 0.2)
        assert pooled.ci_high == pytest.approx(1.5 + z * 0.2)

    def test_small_sample_df_adjustment(self):
        est = [0.9, 1.1, 1.3, 0.8, 1.0]
        var = [0.09, 0.11, 0.10, 0.12, 0.08]
        m = 5
        q = np.array(est)
        b = q.var(ddof=1)
        t = np.mean(var) + (1 + 1 / m) * b
        lam = (1 + 1 / m) * b / t
        df_classic = (m - 1) / lam**2
        nu = 40.0
        df_obs = (nu + 1) / (nu + 3) * nu * (1 - lam)
        expected = 1.0 / (1.0 / df_classic + 1.0 / df_obs)
        pooled = rubin_pool(est, var, df_complete=nu)
        assert pooled.df == pytest.approx(expected, rel=1e-12)
        assert pooled.df < min(df_classic, nu)
        tcrit = stats.t.ppf(0.975, expected)
        assert pooled.ci_high - pooled.ci_low == pytest.approx(
            2 * tcrit * math.sqrt(t), rel=1e-12
        )

    def test_adjusted_df_never_exceeds_classical(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            m = int(rng.integers(2, 12))
            est = rng.normal(size=m)
            var = rng.uniform(0.01, 1.0, size=m)
            nu = float(rng.uniform(5, 500))
            adj = rubin_pool(est, var, df_complete=nu)
            classic = rubin_pool(est, var)
            assert adj.df <= classic.df + 1e-9
            assert adj.df <= nu

    def test_confidence_level_changes_interval(self):
        p95 = rubin_pool([1.0, 2.0], [0.5, 0.5], confidence=0.95)
        p80 = rubin_pool([1.0, 2.0], [0.5, 0.5], confidence=0.80)
        assert (p80.ci_high - p80.ci_low) < (p95.ci_high - p95.ci_low)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="at least two"):
            rubin_pool([1.0], [1.0])
        with pytest.raises(ValueError, match="matching"):
            rubin_pool([1.0, 2.0], [1.0])
        with pytest.raises(ValueError, match="finite"):
            rubin_pool([1.0, math.nan], [1.0, 1.0])
        with pytest.raises(ValueError, match="confidence"):
            rubin_pool([1.0, 2.0], [1.0, 1.0], confidence=1.5)
        with pytest.raises(ValueError, match="df_complete"):
            rubin_pool([1.0, 2.0], [1.0, 1.0], df_complete=-3)


class TestComputeMetrics:
    def test_hand_checked_summaries(self):
        est = [1.0, 2.0, 3.0, 2.0]
        lo = [0.5, 1.5, 2.5, 1.5]
        hi = [1.5, 2.5, 3.5, 2.5]
        met = compute_metrics(est, lo, hi, truth=2.0)
        assert met.mean_estimate == 2.0
        assert met.absolute_bias == 0.0
        assert met.percent_bias == 0.0
        assert met.coverage == 0.5
        assert met.rmse == pytest.approx(math.sqrt(0.5))
        assert met.empirical_sd == pytest.approx(np.std(est, ddof=1))
        assert math.isnan(met.type1_rate)

    def test_percent_bias_undefined_at_zero_truth(self):
        met = compute_metrics([0.1, -0.1], [-1, -1], [1, 1], truth=0.0)
        assert math.isnan(met.percent_bias)
        assert met.absolute_bias == 0.0

    def test_rejection_rate_under_zero_truth(self):
        est = np.array([0.5, -0.1, 2.5, 0.2])
        se = np.array([1.0, 1.0, 1.0, 1.0])
        met = compute_metrics(est, est - 2 * se, est + 2 * se, truth=0.0, std_errors=se)
        # |z| >= 1.96 only for the 2.5 entry
        assert met.type1_rate == 0.25

    def test_rejection_uses_t_reference_when_dfs_given(self):
        est = np.array([2.1, 2.1])
        se = np.array([1.0, 1.0])
        with_t = compute_metrics(est, est - 1, est + 1, truth=0.0, std_errors=se,
                                 dfs=np.array([3.0, 3.0]))
        with_z = compute_metrics(est, est - 1, est + 1, truth=0.0, std_errors=se)
        # t(3) critical value exceeds 2.1, the normal one does not
        assert with_t.type1_rate == 0.0
        assert with_z.type1_rate == 1.0

    def test_mc_interval_narrows_with_replications(self):
        rng = np.random.default_rng(7)
        small = rng.normal(1.4, 0.3, size=25)
        large = rng.normal(1.4, 0.3, size=2500)
        met_small = compute_metrics(small, small - 1, small + 1, truth=1.4)
        met_large = compute_metrics(large, large - 1, large + 1, truth=1.4)
        assert (met_large.mean_mc_high - met_large.mean_mc_low) < (
            met_small.mean_mc_high - met_small.mean_mc_low
        )
        assert met_large.mean_mc_low < 1.4 < met_large.mean_mc_high

    def test_input_validation(self):
        with pytest.raises(ValueError, match="matching"):
            compute_metrics([1.0], [0.5], [1.5, 2.0], truth=1.0)
        with pytest.raises(ValueError, match="std_errors"):
            compute_metrics([1.0, 2.0], [0, 0], [3, 3], truth=0.0,
                            std_errors=[1.0, -1.0])
        with pytest.raises(ValueError, match="dfs"):
            compute_metrics([1.0, 2.0], [0, 0], [3, 3], truth=0.0,
                            std_errors=[1.0, 1.0], dfs=[5.0, -2.0])
