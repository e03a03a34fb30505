"""Empirical-density machinery: kernel density estimates, descriptive moments
with unbiased normalization, Jarque-Bera normality test, and intervals."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmpiricalDensity",
    "GaussianDensity",
    "DensityStats",
    "DegenerateSampleError",
    "kde",
    "silverman_bandwidth",
    "describe",
    "jarque_bera",
    "jb_from_moments",
    "chi2_2_sf",
    "interval",
    "significance_stars",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Convention metadata recorded alongside every stats row (ambiguous in the
# usual table notes, so we pin it explicitly).
MOMENT_CONVENTIONS = {
    "std": "sqrt(sum((x-mean)^2)/(n-1))",
    "skew": "adjusted Fisher-Pearson: g1*sqrt(n*(n-1))/(n-2)",
    "kurtosis": "adjusted Fisher excess: ((n+1)*g2+6)*(n-1)/((n-2)*(n-3))",
    "jarque_bera": "(n/6)*(g1^2 + g2^2/4) on the plain moment estimators",
    "skew_test": "two-sided normal test with SE = sqrt(6/n)",
}


class DegenerateSampleError(ValueError):
    """Sample has zero spread where strictly positive spread is required."""


@dataclass(frozen=True)
class EmpiricalDensity:
    """A density nowcast represented by n sampled draws (percent growth units)."""

    samples: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("EmpiricalDensity needs at least 2 scalar samples")
        if not np.all(np.isfinite(s)):
            raise ValueError("EmpiricalDensity samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.size

    def mean(self) -> float:
        return float(np.mean(self.samples))

    def median(self) -> float:
        return float(np.median(self.samples))

    def std(self) -> float:
        return float(np.std(self.samples, ddof=1))


@dataclass(frozen=True)
class GaussianDensity:
    """An analytic Gaussian density nowcast with mean and variance."""

    mean: float
    variance: float

    def __post_init__(self):
        if not (self.variance > 0.0) or not np.isfinite(self.variance):
            raise ValueError(f"variance must be strictly positive, got {self.variance}")
        if not np.isfinite(self.mean):
            raise ValueError("mean must be finite")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def pdf(self, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=float)
        z = (grid - self.mean) / self.std
        return np.exp(-0.5 * z * z) / (self.std * _SQRT_2PI)


def silverman_bandwidth(samples) -> float:
    """Rule-of-thumb bandwidth 0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    std = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75.0, 25.0])
    spread = min(std, (q75 - q25) / 1.34)
    return 0.9 * spread * n ** (-0.2)


def kde(samples, grid, bandwidth="auto") -> np.ndarray:
    """Gaussian kernel density estimate of `samples` evaluated on `grid`.

    With bandwidth="auto" the Silverman rule is used; zero-spread samples fall
    back to h = 1e-3 with a warning so the estimate stays well defined.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("kde needs at least 2 samples")
    grid = np.asarray(grid, dtype=float)
    if bandwidth == "auto":
        h = silverman_bandwidth(x)
        if not h > 0.0:
            warnings.warn("zero-spread samples: falling back to bandwidth 1e-3")
            h = 1e-3
    else:
        h = float(bandwidth)
        if not h > 0.0:
            raise ValueError("bandwidth must be positive")
    z = (grid[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * _SQRT_2PI)


def _central_moments(x: np.ndarray):
    n = x.size
    mean = np.mean(x)
    d = x - mean
    m2 = np.mean(d * d)
    m3 = np.mean(d ** 3)
    m4 = np.mean(d ** 4)
    return n, mean, m2, m3, m4


def _plain_skew_kurt(x: np.ndarray):
    """Plain (biased) moment estimators g1 and excess g2."""
    n, _, m2, m3, m4 = _central_moments(x)
    if m2 <= 0.0:
        raise DegenerateSampleError("skew/kurtosis undefined for zero-variance sample")
    g1 = m3 / m2 ** 1.5
    g2 = m4 / (m2 * m2) - 3.0
    return n, g1, g2


def significance_stars(pvalue: float) -> str:
    """Stars at the 10/5/1 percent levels."""
    if pvalue <= 0.01:
        return "***"
    if pvalue <= 0.05:
        return "**"
    if pvalue <= 0.10:
        return "*"
    return ""


@dataclass(frozen=True)
class DensityStats:
    """Descriptive statistics of a density nowcast (unbiased normalizations)."""

    n: int
    mean: float
    median: float
    std: float
    skew: float
    kurtosis: float
    skew_pvalue: float
    jb_stat: float
    jb_pvalue: float
    conventions: dict = field(default_factory=lambda: dict(MOMENT_CONVENTIONS))

    @property
    def skew_stars(self) -> str:
        return significance_stars(self.skew_pvalue)

    @property
    def jb_stars(self) -> str:
        return significance_stars(self.jb_pvalue)

    def to_table_row(self) -> dict:
        """Row keyed like the descriptive-stats tables in the reports."""
        return {
            "Mean": self.mean,
            "Median": self.median,
            "Standard dev.": self.std,
            "Skew": f"{self.skew:.3f}{self.skew_stars}",
            "Kurtosis": self.kurtosis,
            "Jarque-Bera test": f"{self.jb_stat:.3f}{self.jb_stars}",
            "_conventions": self.conventions,
        }


def describe(samples) -> DensityStats:
    """Mean/median/std plus bias-adjusted skew and Fisher excess kurtosis.

    Skew significance uses the large-sample normal test with SE = sqrt(6/n),
    two-sided. Requires n >= 8 for stable higher moments.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 8:
        raise ValueError("describe needs n >= 8 samples")
    n, g1, g2 = _plain_skew_kurt(x)
    skew = g1 * math.sqrt(n * (n - 1.0)) / (n - 2.0)
    kurt = ((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0))
    z = skew / math.sqrt(6.0 / n)
    skew_p = 2.0 * _normal_sf(abs(z))
    jb, jb_p = jarque_bera(x)
    return DensityStats(
        n=n,
        mean=float(np.mean(x)),
        median=float(np.median(x)),
        std=float(np.std(x, ddof=1)),
        skew=float(skew),
        kurtosis=float(kurt),
        skew_pvalue=float(skew_p),
        jb_stat=jb,
        jb_pvalue=jb_p,
    )


def jb_from_moments(n: int, skew: float, excess_kurtosis: float) -> float:
    """Jarque-Bera statistic (n/6) * (S^2 + K^2/4) from given sample moments."""
    return (n / 6.0) * (skew * skew + excess_kurtosis * excess_kurtosis / 4.0)


def chi2_2_sf(x: float) -> float:
    """Upper tail of the chi-squared distribution with 2 dof: exp(-x/2)."""
    if x < 0.0:
        raise ValueError("chi-squared statistic must be non-negative")
    return math.exp(-0.5 * x)


def jarque_bera(samples) -> tuple[float, float]:
    """Jarque-Bera normality test; p-value from the chi2(2) upper tail."""
    x = np.asarray(samples, dtype=float)
    if x.size < 8:
        raise ValueError("jarque_bera needs n >= 8 samples")
    n, g1, g2 = _plain_skew_kurt(x)
    stat = jb_from_moments(n, g1, g2)
    return float(stat), chi2_2_sf(stat)


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def interval(density, k: float) -> tuple[float, float]:
    """Mean +/- k standard deviations of a density nowcast.

    For Gaussian densities k=2 is approximately a 95 percent interval.
    """
    if not k > 0.0:
        raise ValueError("interval width multiplier k must be positive")
    if isinstance(density, GaussianDensity):
        mu, sd = density.mean, density.std
    elif isinstance(density, EmpiricalDensity):
        mu, sd = density.mean(), density.std()
    else:
        raise TypeError(f"unsupported density type: {type(density)!r}")
    return (mu - k * sd, mu + k * sd)
