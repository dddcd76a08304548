import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cleverscore.evt import (
    SCALE_FLOOR,
    ReverseWeibullParams,
    fit_reverse_weibull_mle,
    kolmogorov_pvalue,
    ks_test,
    log_likelihood,
    reverse_weibull_cdf,
    reverse_weibull_logpdf,
    sample_reverse_weibull,
)

TRUE = ReverseWeibullParams(3.0, 0.5, 2.0)


def test_cdf_examples():
    assert reverse_weibull_cdf(TRUE, 3.0) == 1.0
    assert reverse_weibull_cdf(TRUE, 10.0) == 1.0
    p = ReverseWeibullParams(2.0, 0.7, 1.0)
    assert reverse_weibull_cdf(p, 2.0 - 0.7) == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert reverse_weibull_cdf(TRUE, -1e6) == 0.0


def test_matches_scipy_weibull_max():
    y = np.linspace(0.5, 2.99, 50)
    ref = stats.weibull_max(TRUE.shape, loc=TRUE.location, scale=TRUE.scale)
    np.testing.assert_allclose(reverse_weibull_cdf(TRUE, y), ref.cdf(y), rtol=1e-12)
    np.testing.assert_allclose(reverse_weibull_logpdf(TRUE, y), ref.logpdf(y), rtol=1e-10)


def test_param_validation():
    with pytest.raises(ValueError):
        ReverseWeibullParams(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        ReverseWeibullParams(math.inf, 1.0, 1.0)


def test_sampler_matches_cdf():
    y = sample_reverse_weibull(TRUE, 5000, np.random.default_rng(0))
    assert np.all(y < TRUE.location)
    assert stats.kstest(y, lambda t: reverse_weibull_cdf(TRUE, t)).pvalue > 0.01


def test_recovers_location():
    y = sample_reverse_weibull(TRUE, 10_000, np.random.default_rng(1))
    fit = fit_reverse_weibull_mle(y)
    assert abs(fit.location - 3.0) <= 0.02 * 3.0
    assert fit.regular and not fit.degenerate and not fit.gumbel_limit
    assert fit.endpoint_estimate == fit.location


def test_point_mass_is_degenerate():
    fit = fit_reverse_weibull_mle(np.full(30, 7.25))
    assert fit.degenerate
    assert fit.location == 7.25
    assert fit.params.scale == SCALE_FLOOR and fit.params.shape == 1.0


def test_needs_two_samples():
    with pytest.raises(ValueError):
        fit_reverse_weibull_mle(np.array([1.0]))


@given(seed=st.integers(0, 10_000), n=st.integers(5, 300), shape=st.floats(0.5, 8.0))
def test_fit_contracts(seed, n, shape):
    y = sample_reverse_weibull(ReverseWeibullParams(1.0, 0.3, shape), n, np.random.default_rng(seed))
    fit = fit_reverse_weibull_mle(y)
    assert fit.location >= y.max()
    assert fit.endpoint_estimate >= y.max()
    assert fit.log_likelihood >= fit.initial_log_likelihood - 1e-9
    assert 0.0 <= fit.ks_statistic <= 1.0 and 0.0 <= fit.ks_pvalue <= 1.0
    # the end-point can sit ~1e-9 of the range above max(y), where original units lose digits
    assert fit.log_likelihood == pytest.approx(log_likelihood(fit.params, y), rel=1e-6, abs=1e-6)


def test_fit_is_deterministic():
    y = sample_reverse_weibull(TRUE, 400, np.random.default_rng(5))
    assert fit_reverse_weibull_mle(y) == fit_reverse_weibull_mle(y.copy())


@pytest.mark.parametrize("k, t", [(3.7, 0.0), (1.0, -12.5), (1e-3, 4.0), (250.0, 1e3)])
def test_scale_and_shift_equivariance(k, t):
    y = sample_reverse_weibull(TRUE, 500, np.random.default_rng(6))
    base = fit_reverse_weibull_mle(y).params
    moved = fit_reverse_weibull_mle(k * y + t).params
    assert moved.location == pytest.approx(k * base.location + t, rel=1e-6)
    assert moved.scale == pytest.approx(k * base.scale, rel=1e-6)
    assert moved.shape == pytest.approx(base.shape, rel=1e-6)


def test_gumbel_limit_falls_back_to_sample_max():
    # two atoms: the continuous likelihood keeps rising as the end-point recedes
    y = np.array([8.05] * 480 + [8.17] * 20)
    fit = fit_reverse_weibull_mle(y)
    assert fit.gumbel_limit
    assert fit.endpoint_estimate == 8.17
    assert fit.location > fit.endpoint_estimate


def test_ks_under_null():
    rng = np.random.default_rng(7)
    passes = sum(ks_test(sample_reverse_weibull(TRUE, 500, rng), TRUE)[1] > 0.05 for _ in range(200))
    assert passes >= 180


def test_ks_rejects_gross_misfit():
    y = np.random.default_rng(8).random(500)
    d, p = ks_test(y, ReverseWeibullParams(5.0, 0.1, 1.0))
    assert p < 0.01 and 0.0 <= d <= 1.0


def test_ks_statistic_matches_scipy():
    y = sample_reverse_weibull(TRUE, 300, np.random.default_rng(9))
    d, _ = ks_test(y, TRUE)
    ref = stats.kstest(y, lambda t: reverse_weibull_cdf(TRUE, t))
    assert d == pytest.approx(ref.statistic, rel=1e-12)


def test_kolmogorov_pvalue_range():
    assert kolmogorov_pvalue(0.0, 100) == 1.0
    assert kolmogorov_pvalue(1.0, 100) < 1e-50
    assert 0.0 < kolmogorov_pvalue(0.05, 500) < 1.0
