import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from densecast.density import (
    DegenerateSampleError,
    DensityStats,
    EmpiricalDensity,
    GaussianDensity,
    chi2_2_sf,
    describe,
    interval,
    jarque_bera,
    jb_from_moments,
    kde,
    significance_stars,
    silverman_bandwidth,
)


def test_kde_two_point_hand_value():
    # two samples at -1 and 1 with h=1: estimate at 0 is phi(1)
    grid = np.array([0.0])
    val = kde([-1.0, 1.0], grid, bandwidth=1.0)[0]
    assert val == pytest.approx(math.exp(-0.5) / math.sqrt(2 * math.pi), abs=1e-12)
    assert val == pytest.approx(0.2420, abs=5e-5)


def test_kde_nonnegative_and_unit_mass():
    rng = np.random.default_rng(7)
    x = rng.normal(1.5, 2.0, size=200)
    std = np.std(x, ddof=1)
    grid = np.linspace(x.mean() - 10 * std, x.mean() + 10 * std, 4001)
    dens = kde(x, grid)
    assert np.all(dens >= 0.0)
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_kde_consistency_standard_normal():
    rng = np.random.default_rng(11)
    x = rng.normal(size=10_000)
    grid = np.linspace(-3, 3, 121)
    dens = kde(x, grid)
    assert np.max(np.abs(dens - stats.norm.pdf(grid))) <= 0.02


def test_kde_zero_spread_fallback_warns():
    with pytest.warns(UserWarning):
        dens = kde([2.0, 2.0, 2.0], np.array([2.0]))
    assert np.isfinite(dens[0])


def test_silverman_matches_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=500)
    std = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    expected = 0.9 * min(std, iqr / 1.34) * 500 ** (-0.2)
    assert silverman_bandwidth(x) == pytest.approx(expected, rel=1e-12)


def test_describe_symmetric_sample_zero_skew():
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0] * 2)
    d = describe(x)
    assert d.skew == pytest.approx(0.0, abs=1e-12)
    assert d.mean == pytest.approx(d.median, abs=1e-12)


def test_describe_matches_scipy_adjusted_estimators():
    rng = np.random.default_rng(5)
    x = rng.gamma(2.0, size=300)
    d = describe(x)
    assert d.std == pytest.approx(np.std(x, ddof=1), rel=1e-12)
    assert d.skew == pytest.approx(stats.skew(x, bias=False), rel=1e-10)
    assert d.kurtosis == pytest.approx(stats.kurtosis(x, fisher=True, bias=False), rel=1e-10)


def test_describe_kurtosis_of_large_normal_sample():
    rng = np.random.default_rng(17)
    x = rng.normal(size=10_000)
    assert describe(x).kurtosis == pytest.approx(0.0, abs=0.1)


def test_describe_rejects_small_and_degenerate_samples():
    with pytest.raises(ValueError):
        describe([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateSampleError):
        describe([1.0] * 20)


def test_skew_significance_stars_match_reported_levels():
    # published descriptive rows: n=100 draws, skew -0.597 ** / -0.428 * / 0.718 ***
    def stars_for(skew, n=100):
        z = skew / math.sqrt(6.0 / n)
        p = 2 * stats.norm.sf(abs(z))
        return significance_stars(p)

    assert stars_for(-0.597) == "**"
    assert stars_for(-0.428) == "*"
    assert stars_for(0.718) == "***"
    assert stars_for(-0.044) == ""


def test_jb_from_moments_hand_case():
    # (100/6) * (0.597^2 + 0.160^2/4) = 6.047
    stat = jb_from_moments(100, -0.597, 0.160)
    assert stat == pytest.approx((100 / 6) * (0.3564 + 0.0064), abs=2e-3)
    assert stat == pytest.approx(6.05, abs=0.01)


def test_jb_null_value_and_chi2_tail():
    assert jb_from_moments(100, 0.0, 0.0) == 0.0
    assert chi2_2_sf(0.0) == 1.0
    assert chi2_2_sf(5.991) == pytest.approx(0.05, abs=1e-3)


def test_jb_stars_match_reported_rows():
    # JB 5.796 -> * and 8.390 -> ** under the chi2(2) tail
    assert significance_stars(chi2_2_sf(5.796)) == "*"
    assert significance_stars(chi2_2_sf(8.390)) == "**"


def test_jarque_bera_agrees_with_scipy():
    rng = np.random.default_rng(23)
    x = rng.standard_t(df=5, size=500)
    stat, p = jarque_bera(x)
    sp = stats.jarque_bera(x)
    assert stat == pytest.approx(sp.statistic, rel=1e-9)
    assert p == pytest.approx(sp.pvalue, rel=1e-6)


def test_interval_gaussian_and_empirical():
    lo, hi = interval(GaussianDensity(0.0, 1.0), 2.0)
    assert (lo, hi) == (-2.0, 2.0)
    lo, hi = interval(EmpiricalDensity(np.array([0.0, 0.0, 4.0, 4.0])), 1.0)
    sd = math.sqrt(16.0 / 3.0)
    assert lo == pytest.approx(2.0 - sd, abs=1e-9)
    assert hi == pytest.approx(2.0 + sd, abs=1e-9)
    assert lo == pytest.approx(-0.309, abs=1e-3)
    with pytest.raises(ValueError):
        interval(GaussianDensity(0.0, 1.0), 0.0)


def test_gaussian_density_validation_and_pdf_mass():
    with pytest.raises(ValueError):
        GaussianDensity(0.0, 0.0)
    g = GaussianDensity(1.0, 4.0)
    grid = np.linspace(-30, 30, 10_001)
    assert np.trapezoid(g.pdf(grid), grid) == pytest.approx(1.0, abs=1e-6)


def test_empirical_density_validation():
    with pytest.raises(ValueError):
        EmpiricalDensity(np.array([1.0]))
    with pytest.raises(ValueError):
        EmpiricalDensity(np.array([1.0, np.nan]))


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3),
    b=st.floats(-10, 10),
    seed=st.integers(0, 2**16),
)
def test_describe_affine_equivariance(a, b, seed):
    x = np.random.default_rng(seed).normal(size=64)
    base = describe(x)
    moved = describe(a * x + b)
    assert moved.mean == pytest.approx(a * base.mean + b, rel=1e-8, abs=1e-8)
    assert moved.std == pytest.approx(abs(a) * base.std, rel=1e-8)
    assert moved.skew == pytest.approx(math.copysign(1, a) * base.skew, rel=1e-6, abs=1e-9)
    assert moved.kurtosis == pytest.approx(base.kurtosis, rel=1e-6, abs=1e-9)


def test_table_row_has_expected_columns():
    row = describe(np.arange(20.0)).to_table_row()
    for key in ("Mean", "Median", "Standard dev.", "Skew", "Kurtosis", "Jarque-Bera test"):
        assert key in row
    assert "skew" in row["_conventions"]
