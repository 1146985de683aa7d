"""Decision rule over the calibration distribution.

The calibration counts give a sample mean and sample standard deviation
(n-1 denominator); the execution count is standardized as
``z = (n_star - mean) / stddev`` and the one-sided verdict compares z against
the normal critical value for the chosen significance level. A calibration is
only usable when every count is positive and max/min stays within 10, the
literal reading of "within an order of magnitude".

The normal CDF is evaluated through erf: a Maclaurin series for small
arguments and a Lentz-evaluated continued fraction for the tail, which keeps
absolute error near machine precision (the contract asks for 1e-7).

Known caveat, measured rather than corrected: with a sample mean/stddev and a
normal CDF the true null false-positive rate exceeds alpha for small n (the
Student-t effect); the simulator quantifies it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

COPING_EVIDENCE = "COPING_EVIDENCE"
NO_COPING_EVIDENCE = "NO_COPING_EVIDENCE"
UNSTABLE_CALIBRATION = "UNSTABLE_CALIBRATION"

DEFAULT_ALPHA = 0.05
STABILITY_RATIO = 10

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_SERIES_CUTOVER = 2.0
_LENTZ_TINY = 1e-30
_MIN_POSITIVE = 5e-324


class DegenerateCalibrationError(ValueError):
    """Calibration counts without any spread; the z-score is undefined."""


@dataclass(frozen=True)
class CalibrationDistribution:
    counts: tuple[int, ...]
    mean: float
    stddev: float
    stable: bool


@dataclass(frozen=True)
class AnalysisResult:
    n_star: int
    z: float
    p_of_z: float
    confidence: float
    verdict: str
    alpha: float


def summarize(counts: Iterable[int] | Sequence[int]) -> CalibrationDistribution:
    """Sample mean, sample (n-1) standard deviation and stability flag."""
    values = tuple(int(c) for c in counts)
    if len(values) < 2:
        raise ValueError("need at least 2 calibration counts")
    if any(c < 0 for c in values):
        raise ValueError("calibration counts must be non-negative")
    if not any(values):
        raise ValueError("all calibration counts are zero; nothing was measured")
    arr = np.asarray(values, dtype=float)
    lo, hi = min(values), max(values)
    stable = lo > 0 and hi <= STABILITY_RATIO * lo
    return CalibrationDistribution(
        counts=values,
        mean=float(arr.mean()),
        stddev=float(arr.std(ddof=1)),
        stable=stable,
    )


def z_score(dist: CalibrationDistribution, n_star: int) -> float:
    if dist.stddev == 0.0:
        raise DegenerateCalibrationError(
            "calibration counts show zero spread; the standardized score is undefined"
        )
    return (n_star - dist.mean) / dist.stddev


def _erf_series(x: float) -> float:
    # Maclaurin series, |x| < 2: erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
    total = x
    power = x
    n = 0
    x_sq = x * x
    while True:
        n += 1
        power *= -x_sq / n
        term = power / (2 * n + 1)
        total += term
        if abs(term) <= 1e-18 * abs(total):
            return 2.0 * _INV_SQRT_PI * total


def _erfc_tail(x: float) -> float:
    # Continued fraction for x >= 2, modified Lentz evaluation:
    # sqrt(pi) e^(x^2) erfc(x) = 1/(x+ (1/2)/(x+ 1/(x+ (3/2)/(x+ ...))))
    f = _LENTZ_TINY
    c = f
    d = 0.0
    n = 0
    while n < 200:
        n += 1
        a = 1.0 if n == 1 else (n - 1) / 2.0
        d = x + a * d
        if d == 0.0:
            d = _LENTZ_TINY
        c = x + a / c
        if c == 0.0:
            c = _LENTZ_TINY
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return math.exp(-x * x) * _INV_SQRT_PI * f


def _erfc_positive(x: float) -> float:
    # erfc(x) for x >= 0
    if x < _SERIES_CUTOVER:
        return 1.0 - _erf_series(x)
    return _erfc_tail(x)


def normal_cdf(z: float) -> float:
    """Standard normal CDF, clamped into the open interval (0, 1)."""
    if math.isnan(z):
        raise ValueError("z must be finite")
    x = z / _SQRT2
    if z < 0.0:
        value = 0.5 * _erfc_positive(-x)
    else:
        value = 1.0 - 0.5 * _erfc_positive(x)
    if value <= 0.0:
        return _MIN_POSITIVE
    if value >= 1.0:
        return math.nextafter(1.0, 0.0)
    return value


def normal_quantile(p: float) -> float:
    """Inverse of normal_cdf by bisection; exact enough for critical values."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return 0.5 * (lo + hi)


def analyze(
    dist: CalibrationDistribution, n_star: int, alpha: float = DEFAULT_ALPHA
) -> AnalysisResult:
    """Apply the one-sided decision rule to the execution count.

    The verdict is UNSTABLE_CALIBRATION whenever the calibration counts fail
    the stability check, regardless of z; otherwise COPING_EVIDENCE exactly
    when z falls below the negative critical value for `alpha`. The reported
    confidence is 1 - CDF(z) in every case.
    """
    if not 0.0 < alpha <= 0.5:
        raise ValueError("alpha must lie in (0, 0.5]")
    z = z_score(dist, n_star)
    p = normal_cdf(z)
    confidence = 1.0 - p
    if not dist.stable:
        verdict = UNSTABLE_CALIBRATION
    elif z < -normal_quantile(1.0 - alpha):
        verdict = COPING_EVIDENCE
    else:
        verdict = NO_COPING_EVIDENCE
    return AnalysisResult(
        n_star=int(n_star), z=z, p_of_z=p, confidence=confidence, verdict=verdict, alpha=alpha
    )
