"""Baseline samplers and the normal inverse CDF."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvi.sampling import (
    MAX_SOBOL_DIM,
    SampleBatch,
    Scheme,
    normal_cdf,
    normal_inverse_cdf,
    sample_mc,
    sample_qmc,
    sample_rqmc,
)


def _bisect_quantile(u, tol=1e-12):
    """Independent oracle: bisection on Phi built from math.erf."""
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < u:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# normal_inverse_cdf
# ---------------------------------------------------------------------------

class TestInverseCdf:

    def test_median(self):
        assert normal_inverse_cdf(0.5) == 0.0

    def test_975_against_bisection(self):
        oracle = _bisect_quantile(0.975)
        assert abs(normal_inverse_cdf(0.975) - oracle) < 1e-9
        assert round(oracle, 6) == 1.959964

    @pytest.mark.parametrize("u", [1e-6, 1e-4, 0.02, 0.3, 0.7, 0.98, 1 - 1e-4])
    def test_against_bisection(self, u):
        assert abs(normal_inverse_cdf(u) - _bisect_quantile(u)) < 1e-9

    def test_round_trip_sweep(self):
        u = np.concatenate([np.geomspace(1e-6, 0.5, 200), 1 - np.geomspace(1e-6, 0.5, 200)])
        assert np.max(np.abs(normal_cdf(normal_inverse_cdf(u)) - u)) < 1e-8

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_outside_open_interval(self, u):
        with pytest.raises(ValueError):
            normal_inverse_cdf(u)

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_antisymmetric(self, u):
        assert normal_inverse_cdf(u) == pytest.approx(-normal_inverse_cdf(1 - u), abs=1e-8)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

class TestMonteCarlo:

    def test_deterministic(self):
        a, b = sample_mc(3, 50, 11), sample_mc(3, 50, 11)
        assert np.array_equal(a.points, b.points)

    def test_seeds_differ(self):
        assert not np.array_equal(sample_mc(2, 10, 1).points, sample_mc(2, 10, 2).points)

    def test_moments(self):
        x = sample_mc(1, 100_000, 3).points.ravel()
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.03

    def test_metadata(self):
        b = sample_mc(4, 7, 0)
        assert b.scheme is Scheme.MC and b.n == 7 and b.dim == 4
        assert np.all(b.weights == 1 / 7)

    def test_variance_rate(self):
        """Estimator variance of a bounded integrand falls like 1/N."""
        ns = [100, 1000, 10_000]
        variances = []
        for n in ns:
            est = [np.mean(np.cos(sample_mc(1, n, [s, n]).points)) for s in range(300)]
            variances.append(np.var(est))
        slope = np.polyfit(np.log(ns), np.log(variances), 1)[0]
        assert -1.3 <= slope <= -0.7


# ---------------------------------------------------------------------------
# Quasi and randomized quasi Monte Carlo
# ---------------------------------------------------------------------------

class TestQmc:

    def test_first_point_is_zero(self):
        assert sample_qmc(1, 1).points[0, 0] == 0.0

    def test_mean_small(self):
        """Skipping the origin, points 1..2^k - 1 are symmetric about u = 1/2."""
        assert abs(sample_qmc(1, 2 ** 10 - 1).points.mean()) <= 1e-12

    def test_mean_at_power_of_two(self):
        """Point 2^k opens the next dyadic level: u = j / 2^(k+1) with j odd."""
        x = sample_qmc(1, 2 ** 10).points.ravel()
        j = normal_cdf(x[-1]) * 2 ** 11
        assert abs(j - round(j)) < 1e-9 and round(j) % 2 == 1
        assert x.mean() == pytest.approx(x[-1] / 2 ** 10, abs=1e-12)

    def test_deterministic(self):
        assert np.array_equal(sample_qmc(5, 64).points, sample_qmc(5, 64).points)

    def test_high_dimension_supported(self):
        assert sample_qmc(200, 8).points.shape == (8, 200)

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            sample_qmc(MAX_SOBOL_DIM + 1, 4)

    def test_finite(self):
        assert np.all(np.isfinite(sample_qmc(10, 1000).points))


class TestRqmc:

    def test_zero_shift_recovers_qmc(self):
        d = 3
        assert np.array_equal(sample_rqmc(d, 32, 0, shift=np.zeros(d)).points, sample_qmc(d, 32).points)

    def test_seeds_differ(self):
        assert not np.array_equal(sample_rqmc(2, 16, 1).points, sample_rqmc(2, 16, 2).points)

    def test_deterministic(self):
        assert np.array_equal(sample_rqmc(2, 16, 9).points, sample_rqmc(2, 16, 9).points)

    def test_unbiased_over_shifts(self):
        """Mean over 200 shifts of E[cos X + X^2] against a 1e6-draw reference."""
        f = lambda x: np.cos(x[:, 0]) + x[:, 0] ** 2
        est = np.array([f(sample_rqmc(1, 20, s).points).mean() for s in range(200)])
        ref = f(sample_mc(1, 1_000_000, 99).points)
        se = math.hypot(est.std(ddof=1) / math.sqrt(est.size), ref.std(ddof=1) / 1e3)
        assert abs(est.mean() - ref.mean()) < 3 * se
        assert abs(est.mean() - (math.exp(-0.5) + 1.0)) < 3 * se

    def test_batch_rejects_non_finite(self):
        with pytest.raises(ValueError):
            SampleBatch(1, np.array([[np.inf]]), Scheme.MC)
