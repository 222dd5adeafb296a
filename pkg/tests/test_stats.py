import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pinned_balls import stats
from pinned_balls.core import DataCompatError, InsufficientDataError, SimConfig, VelocityState
from pinned_balls.dynamics import Trajectory, run_ensemble

scipy_stats = pytest.importorskip("scipy.stats")
scipy_integrate = pytest.importorskip("scipy.integrate")


def make_trajs(arr, config=None):
    """Wrap an (R, S, n) array as trajectories of one synthetic config."""
    R, S, n = arr.shape
    cfg = config or SimConfig(n=n, steps=S - 1, runs=R, snapshot_times=tuple(range(S)))
    return [Trajectory(cfg, r, [VelocityState(s, arr[r, s]) for s in range(S)]) for r in range(R)]


def noise_field(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        w = w[:, None, :]
    R, S, n = w.shape
    return stats.NoiseField(w, tuple(range(S)), tuple(range(R)), np.zeros(S, dtype=int))


class TestMoments:
    def test_identical_runs(self):
        arr = np.tile(np.linspace(0, 1, 7), (5, 2, 1))
        m = stats.estimate_moments(make_trajs(arr))
        assert_array_equal(m.sigma_hat, 0.0)
        assert_allclose(m.mu_hat, arr[0], rtol=1e-15)

    def test_two_runs(self):
        u, w = 0.7, -1.3
        arr = np.array([[[u, 0.0, 1.0]], [[w, 0.0, 2.0]]])
        m = stats.estimate_moments(make_trajs(arr))
        assert_allclose(m.mu_hat[0, 0], (u + w) / 2, rtol=1e-15)
        assert_allclose(m.sigma_hat[0, 0], abs(u - w) / math.sqrt(2), rtol=1e-15)

    def test_synthetic_se(self):
        R = 10**4
        rng = np.random.default_rng(0)
        arr = 0.3 + 0.05 * rng.standard_normal((R, 1, 4))
        m = stats.estimate_moments(make_trajs(arr))
        assert np.all(np.abs(m.mu_hat - 0.3) <= 4 * 0.05 / math.sqrt(R))
        assert np.all(np.abs(m.sigma_hat - 0.05) <= 4 * 0.05 / math.sqrt(2 * R))

    def test_matches_numpy(self):
        rng = np.random.default_rng(1)
        arr = rng.standard_normal((37, 3, 5)) * 3 + 100
        m = stats.estimate_moments(make_trajs(arr))
        assert_allclose(m.mu_hat, arr.mean(axis=0), rtol=1e-14)
        assert_allclose(m.sigma_hat, arr.std(axis=0, ddof=1), rtol=1e-11)

    def test_single_run(self):
        arr = np.zeros((1, 1, 3))
        with pytest.raises(InsufficientDataError):
            stats.estimate_moments(make_trajs(arr))
        m = stats.estimate_moments(make_trajs(arr), allow_single=True)
        assert np.all(np.isnan(m.sigma_hat))

    def test_mixed_configs(self):
        a = make_trajs(np.zeros((2, 1, 3)))
        b = make_trajs(np.zeros((2, 1, 3)), SimConfig(n=3, steps=0, runs=2, seed=1))
        with pytest.raises(DataCompatError):
            stats.estimate_moments(a + b)

    def test_stream_equals_batch(self):
        cfg = SimConfig(n=20, steps=400, runs=12, seed=3, snapshot_times=(0, 200, 400))
        a = stats.stream_moments(cfg)
        b = stats.estimate_moments(run_ensemble(cfg))
        assert_array_equal(a.mu_hat, b.mu_hat)
        assert_array_equal(a.sigma_hat, b.sigma_hat)
        assert a.index_of(200) == 1


class TestResiduals:
    def _moments(self, mu, sig):
        return stats.EnsembleMoments((0,), mu[None], sig[None], 1)

    def test_at_mean_and_one_sd(self):
        mu = np.array([0.0, 1.0, 2.0])
        sig = np.array([0.5, 1.0, 2.0])
        w = stats.residuals(make_trajs(mu[None, None]), self._moments(mu, sig))
        assert_array_equal(w.w_hat, 0.0)
        w = stats.residuals(make_trajs((mu + sig)[None, None]), self._moments(mu, sig))
        assert_allclose(w.w_hat, 1.0, rtol=1e-15)

    def test_frozen_sites_excluded(self):
        arr = np.array([[[0.0, 1.0, 5.0]], [[0.0, 2.0, 5.0]], [[0.0, 0.5, 5.0]]])
        trajs = make_trajs(arr)
        w = stats.residuals(trajs, stats.estimate_moments(trajs))
        assert w.excluded[0] == 2
        assert np.all(np.isnan(w.w_hat[:, 0, [0, 2]]))
        assert np.all(np.isfinite(w.w_hat[:, 0, 1]))

    def test_clt_oracle(self):
        R, n = 200, 50
        rng = np.random.default_rng(5)
        mu = np.linspace(-1, 1, n)
        sig = 0.1 + np.linspace(0, 1, n)
        arr = mu + sig * rng.standard_normal((R, 1, n))
        w = stats.residuals(make_trajs(arr), self._moments(mu, sig)).values(0)
        assert abs(w.mean()) <= 4 / math.sqrt(n * R)
        assert abs(w.var() - 1) <= 4 * math.sqrt(2 / (n * R))

    def test_standardisation_identity(self):
        rng = np.random.default_rng(6)
        arr = rng.standard_normal((30, 2, 8)) * rng.uniform(0.5, 2, 8) + rng.uniform(-1, 1, 8)
        trajs = make_trajs(arr)
        w = stats.residuals(trajs, stats.estimate_moments(trajs)).w_hat
        for s in range(2):
            assert abs(np.mean(w[:, s])) <= 1e-10
            assert abs(np.mean(np.var(w[:, s], axis=0, ddof=1)) - 1) <= 1e-10

    def test_snapshot_mismatch(self):
        a = make_trajs(np.zeros((2, 2, 3)))
        m = stats.EnsembleMoments((0, 5), np.zeros((2, 3)), np.ones((2, 3)), 2)
        with pytest.raises(DataCompatError):
            stats.residuals(a, m)


class TestLagCorrelation:
    def test_periodic_is_one(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((4, 3))
        w = np.tile(base, (1, 20))
        assert_allclose(stats.lag_correlation(noise_field(w), 3), 1.0, rtol=1e-14)

    def test_anticorrelated(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal((10, 1))
        w = c * (-1.0) ** np.arange(40)
        assert_allclose(stats.lag_correlation(noise_field(w), 1), -1.0, rtol=1e-14)

    def test_iid_bound(self):
        rng = np.random.default_rng(2)
        nf = noise_field(rng.standard_normal((1, 1000)))
        rho = stats.lag_correlation_series(nf, 50)
        assert np.all(np.abs(rho) <= 4 / math.sqrt(999))

    def test_exchange_symmetry(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 60))
        a = stats.lag_correlation(noise_field(w), 4)
        b = stats.lag_correlation(noise_field(w[:, ::-1]), 4)
        assert_allclose(a, b, rtol=1e-12)

    def test_run_selection(self):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((3, 60))
        nf = noise_field(w)
        assert_allclose(stats.lag_correlation(nf, 2, run=1), stats.lag_correlation(noise_field(w[[1]]), 2))

    def test_bad_lag(self):
        nf = noise_field(np.zeros((1, 5)))
        with pytest.raises(ValueError):
            stats.lag_correlation(nf, 0)


class TestCorrDensity:
    @pytest.mark.parametrize("n", [5, 10, 100, 1000])
    def test_normalised(self, n):
        val, err = scipy_integrate.quad(lambda r: stats.empirical_corr_density(r, n), -1, 1,
                                        epsabs=1e-12, epsrel=1e-12, limit=200)
        assert abs(val - 1) <= 1e-8

    def test_symmetric(self):
        r = np.linspace(-0.99, 0.99, 199)
        assert_allclose(stats.empirical_corr_density(r, 37), stats.empirical_corr_density(-r, 37), rtol=1e-14)

    def test_sd_n1000(self):
        var, _ = scipy_integrate.quad(lambda r: r * r * stats.empirical_corr_density(r, 1000), -1, 1,
                                      epsabs=1e-14, points=[0.0])
        assert_allclose(math.sqrt(var), 1 / math.sqrt(999), rtol=1e-8)
        assert_allclose(1 / math.sqrt(999), 0.031639, atol=1e-6)

    def test_domain(self):
        with pytest.raises(ValueError):
            stats.empirical_corr_density(0.1, 4)
        with pytest.raises(ValueError):
            stats.empirical_corr_density(1.0, 10)


class TestNormality:
    def test_quantile_sequence(self):
        N = 20000
        x = scipy_stats.norm.ppf((np.arange(1, N + 1) - 0.5) / N)
        rep = stats.normality_report(x)
        assert rep["ks"] <= 1.0 / N + 1e-9

    def test_iid_normal(self):
        x = np.random.default_rng(7).standard_normal(10**5)
        rep = stats.normality_report(x)
        assert rep["ks"] <= 1.63 / math.sqrt(10**5)
        assert abs(rep["skewness"]) < 0.05 and abs(rep["excess_kurtosis"]) < 0.1
        assert sum(rep["hist_counts"]) + rep["below_range"] + rep["above_range"] == 10**5

    def test_constant(self):
        rep = stats.normality_report(np.zeros(5000))
        assert_allclose(rep["ks"], 0.5, atol=1e-12)
        assert rep["degenerate"]

    def test_ks_vs_scipy(self):
        x = np.random.default_rng(8).standard_t(5, 3000)
        assert_allclose(stats.ks_statistic(x), scipy_stats.kstest(x, "norm").statistic, rtol=1e-10)

    def test_ks_critical(self):
        assert_allclose(stats.ks_critical(10**4), 1.6276 / 100, rtol=1e-3)

    def test_histogram_edges(self):
        assert stats.HIST_EDGES.size == 101
        assert_allclose(np.diff(stats.HIST_EDGES), 0.1, rtol=1e-9)


class TestPairs:
    def test_single_run(self):
        nf = noise_field(np.arange(6.0)[None])
        p = stats.pair_scatter(nf, 2)
        assert_array_equal(p, [[1.0, 2.0]])

    def test_iid_correlation(self):
        R = 4000
        nf = noise_field(np.random.default_rng(9).standard_normal((R, 10)))
        p = stats.pair_scatter(nf, 4)
        assert abs(stats.pair_correlation(p)) <= 4 / math.sqrt(R)

    def test_count_matches_retained(self):
        w = np.random.default_rng(10).standard_normal((50, 10))
        w[[3, 7], 5] = np.nan
        p = stats.pair_scatter(noise_field(w), 5)
        assert len(p) == 48

    def test_site_range(self):
        nf = noise_field(np.zeros((2, 5)))
        with pytest.raises(ValueError):
            stats.pair_scatter(nf, 5)
