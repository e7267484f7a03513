"""Error function and normal-distribution primitives.

Everything in the package that needs the normal CDF goes through this module,
so there is exactly one place where tail accuracy is decided.

``erf`` uses the all-positive Maclaurin series

    erf(x) = 2/sqrt(pi) * x * exp(-x^2) * sum_n (2x^2)^n / (1*3*...*(2n+1))

for ``|x| < 2`` and the Laplace continued fraction for ``erfc`` beyond
that. Both branches are accurate to about 1e-15 absolute; ``erfc`` keeps
relative accuracy deep into the tail through the scaled form
``erfcx(x) = exp(x^2) * erfc(x)``.

Scalar functions take and return Python floats. The ``*_array`` variants are
numpy versions of the same algorithms for bulk work (sampling, synthetic
data); they are tested against the scalar ones.
"""

from __future__ import annotations

import math

import numpy as np

SERIES_CUTOFF = 2.0
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _erf_series(x: float) -> float:
    x2 = x * x
    two_x2 = 2.0 * x2
    term = 1.0
    total = 1.0
    n = 0
    while term > 1e-17 * total:
        n += 1
        term *= two_x2 / (2 * n + 1)
        total += term
    return _TWO_OVER_SQRT_PI * x * math.exp(-x2) * total


def erfcx_cf(x: float) -> float:
    """Scaled complementary error function for ``x >= SERIES_CUTOFF``.

    Modified Lentz evaluation of
    ``erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))``.
    """
    tiny = 1e-300
    f = x
    c = x
    d = 0.0
    for n in range(1, 500):
        an = 0.5 * n
        d = x + an * d
        d = 1.0 / (d if d != 0.0 else tiny)
        c = x + an / c
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return _INV_SQRT_PI / f


def erf(x: float) -> float:
    """Error function. Odd, bounded in (-1, 1)."""
    if math.isnan(x):
        return math.nan
    ax = abs(x)
    if ax < SERIES_CUTOFF:
        return _erf_series(x)
    tail = math.exp(-ax * ax) * erfcx_cf(ax)
    return math.copysign(1.0 - tail, x)


def erfc(x: float) -> float:
    """Complementary error function with relative accuracy in the right tail."""
    if math.isnan(x):
        return math.nan
    if x < 0.0:
        return 2.0 - erfc(-x)
    if x < SERIES_CUTOFF:
        return 1.0 - _erf_series(x)
    if x > 27.3:
        return 0.0
    return math.exp(-x * x) * erfcx_cf(x)


def log_erfc(x: float) -> float:
    """``log(erfc(x))`` without underflow for large positive ``x``."""
    if x < SERIES_CUTOFF:
        return math.log(erfc(x))
    return -x * x + math.log(erfcx_cf(x))


def std_normal_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z - LOG_SQRT_2PI)


def std_normal_logpdf(z: float) -> float:
    return -0.5 * z * z - LOG_SQRT_2PI


def std_normal_cdf(z: float) -> float:
    """Standard normal CDF, ``0.5 * erfc(-z / sqrt(2))``."""
    if math.isinf(z):
        return 1.0 if z > 0 else 0.0
    return 0.5 * erfc(-z * _INV_SQRT2)


def log_ndtr(z: float) -> float:
    """``log(std_normal_cdf(z))``, finite for every finite ``z``."""
    if z == math.inf:
        return 0.0
    if z == -math.inf:
        return -math.inf
    if z < 0.0:
        return math.log(0.5) + log_erfc(-z * _INV_SQRT2)
    return math.log1p(-0.5 * erfc(z * _INV_SQRT2))


# 10-point Gauss-Legendre rule for narrow intervals, where subtracting two
# CDF values (or their logs) cancels catastrophically
_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)
_GL_LOGW = np.log(_GL_W)
_NARROW = 0.5


def _is_narrow(lo: float, hi: float) -> bool:
    return (hi - lo) * (max(abs(lo), abs(hi)) + 1.0) < _NARROW


def _log_gl_mass(lo: float, hi: float) -> float:
    half = 0.5 * (hi - lo)
    z = 0.5 * (lo + hi) + half * _GL_X
    terms = _GL_LOGW - 0.5 * z * z
    m = terms.max()
    return float(m + math.log(np.exp(terms - m).sum()) + math.log(half) - LOG_SQRT_2PI)


def log_diff_ndtr(lo: float, hi: float) -> float:
    """``log(Phi(hi) - Phi(lo))``, stable in both tails and for narrow intervals.

    Returns ``-inf`` when ``hi <= lo``.
    """
    if not hi > lo:
        return -math.inf
    if lo >= 0.0:
        lo, hi = -hi, -lo
    if math.isfinite(lo) and math.isfinite(hi) and _is_narrow(lo, hi):
        return _log_gl_mass(lo, hi)
    lp_hi = log_ndtr(hi)
    lp_lo = log_ndtr(lo)
    diff = lp_lo - lp_hi
    if diff == -math.inf:
        return lp_hi
    return lp_hi + math.log(-math.expm1(diff))


# Acklam's rational approximation, used only as the starting point for Newton.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def ndtri_log(log_p: float) -> float:
    """Solve ``log_ndtr(z) = log_p`` for ``log_p <= log(0.5)`` region and beyond.

    Works for any ``log_p < 0``; Newton iterations run on ``log Phi`` so the
    deep lower tail (``p`` far below the smallest double) is handled.
    """
    if log_p >= 0.0:
        return math.inf
    if log_p == -math.inf:
        return -math.inf
    if log_p > -700.0:
        z = _acklam(math.exp(log_p))
    else:
        t = -2.0 * log_p
        z = -math.sqrt(t - math.log(t) - math.log(2.0 * math.pi))
    for _ in range(50):
        lf = log_ndtr(z)
        # d/dz log Phi(z) = phi(z) / Phi(z)
        slope = math.exp(std_normal_logpdf(z) - lf)
        step = (lf - log_p) / slope
        z -= step
        if abs(step) <= 1e-15 * max(1.0, abs(z)):
            break
    return z


def ndtri(p: float) -> float:
    """Inverse of the standard normal CDF."""
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    if p > 0.5:
        return -ndtri_log(math.log1p(-p))
    return ndtri_log(math.log(p))


# ---------------------------------------------------------------- arrays


def _erf_series_array(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    two_x2 = 2.0 * x2
    term = np.ones_like(x)
    total = np.ones_like(x)
    for n in range(1, 200):
        term = term * two_x2 / (2 * n + 1)
        total = total + term
        if np.all(term <= 1e-17 * total):
            break
    return _TWO_OVER_SQRT_PI * x * np.exp(-x2) * total


def _erfcx_cf_array(x: np.ndarray) -> np.ndarray:
    f = x.copy()
    c = x.copy()
    d = np.zeros_like(x)
    for n in range(1, 500):
        an = 0.5 * n
        d = 1.0 / (x + an * d)
        c = x + an / c
        delta = c * d
        f = f * delta
        if np.all(np.abs(delta - 1.0) < 1e-16):
            break
    return _INV_SQRT_PI / f


def erfc_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.empty_like(ax)
    small = ax < SERIES_CUTOFF
    if np.any(small):
        out[small] = 1.0 - _erf_series_array(ax[small])
    big = ~small
    if np.any(big):
        xb = np.minimum(ax[big], 27.3)
        out[big] = np.where(ax[big] > 27.3, 0.0, np.exp(-xb * xb) * _erfcx_cf_array(xb))
    return np.where(x < 0.0, 2.0 - out, out)


def erf_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.empty_like(ax)
    small = ax < SERIES_CUTOFF
    if np.any(small):
        out[small] = _erf_series_array(ax[small])
    big = ~small
    if np.any(big):
        out[big] = 1.0 - erfc_array(ax[big])
    return np.copysign(out, x)


def log_ndtr_array(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    neg = z < 0.0
    if np.any(neg):
        t = -z[neg] * _INV_SQRT2
        res = np.empty_like(t)
        small = t < SERIES_CUTOFF
        if np.any(small):
            res[small] = np.log(1.0 - _erf_series_array(t[small]))
        big = ~small
        if np.any(big):
            tb = t[big]
            res[big] = -tb * tb + np.log(_erfcx_cf_array(tb))
        out[neg] = math.log(0.5) + res
    pos = ~neg
    if np.any(pos):
        out[pos] = np.log1p(-0.5 * erfc_array(z[pos] * _INV_SQRT2))
    return out


def std_normal_cdf_array(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * erfc_array(-z * _INV_SQRT2)


def log_diff_ndtr_array(lo, hi) -> np.ndarray:
    lo, hi = np.broadcast_arrays(np.asarray(lo, np.float64), np.asarray(hi, np.float64))
    flip = lo >= 0.0
    lo2 = np.where(flip, -hi, lo)
    hi2 = np.where(flip, -lo, hi)
    lp_hi = log_ndtr_array(hi2)
    lp_lo = log_ndtr_array(lo2)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lp_hi + np.log(-np.expm1(lp_lo - lp_hi))
        narrow = np.isfinite(lo2) & np.isfinite(hi2) & ((hi2 - lo2) * (np.maximum(-lo2, np.abs(hi2)) + 1.0) < _NARROW)
    for i in zip(*np.nonzero(narrow & (hi2 > lo2))):
        out[i] = _log_gl_mass(float(lo2[i]), float(hi2[i]))
    out = np.where(hi2 > lo2, out, -np.inf)
    return out


def _acklam_array(p: np.ndarray) -> np.ndarray:
    out = np.empty_like(p)
    lower = p < _P_LOW
    upper = p > 1.0 - _P_LOW
    mid = ~(lower | upper)
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        out[mid] = num / den
    for mask, sign, src in ((lower, 1.0, p), (upper, -1.0, 1.0 - p)):
        if np.any(mask):
            q = np.sqrt(-2.0 * np.log(src[mask]))
            num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
            den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
            out[mask] = sign * num / den
    return out


def ndtri_log_array(log_p) -> np.ndarray:
    """Vectorised ``ndtri_log``; entries must satisfy ``log_p < 0``."""
    log_p = np.asarray(log_p, dtype=np.float64)
    z = np.empty_like(log_p)
    mild = log_p > -700.0
    if np.any(mild):
        z[mild] = _acklam_array(np.exp(log_p[mild]))
    deep = ~mild
    if np.any(deep):
        t = -2.0 * log_p[deep]
        z[deep] = -np.sqrt(t - np.log(t) - math.log(2.0 * math.pi))
    for _ in range(50):
        lf = log_ndtr_array(z)
        slope = np.exp(-0.5 * z * z - LOG_SQRT_2PI - lf)
        step = (lf - log_p) / slope
        z = z - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(z))):
            break
    return z
