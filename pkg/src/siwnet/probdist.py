"""Truncated normal distribution: density, likelihood loss, quantiles, intervals, CRPS.

The predictive model for a friction factor ``f`` is a normal distribution with
mean ``mu`` and standard deviation ``sigma`` restricted to ``[a, b]`` (``[0, 1]``
in practice) and renormalised::

    pdf(x) = phi((x - mu) / sigma) / (sigma * (Phi(beta) - Phi(alpha)))
    alpha = (a - mu) / sigma,  beta = (b - mu) / sigma

All normalisers are handled in log space, so ``mu`` far outside ``[a, b]`` with
a tiny ``sigma`` still gives finite log-densities.

Two details differ from the way this loss is often written down. The normal
CDF is ``0.5 * (1 + erf(z / sqrt(2)))``; a ``sqrt(2*pi)`` in the erf argument
is wrong. And the negative log-likelihood keeps the additive constant
``0.5 * log(2*pi)`` and the *positive* normaliser ``Phi(beta) - Phi(alpha)``,
so ``exp(-nll(d, x)) == pdf(d, x)`` holds exactly rather than up to a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import special
from .special import LOG_SQRT_2PI, erf, std_normal_cdf, std_normal_pdf  # noqa: F401
from .tensor import Tensor, as_tensor

__all__ = [
    "TruncatedNormal",
    "Interval",
    "erf",
    "std_normal_pdf",
    "std_normal_cdf",
    "pdf",
    "log_pdf",
    "cdf",
    "sf",
    "quantile",
    "nll",
    "batch_loss",
    "nll_tensor",
    "batch_loss_tensor",
    "interval",
    "central_interval",
    "crps",
    "sample",
    "quantile_array",
    "SIGMA_FLOOR",
]

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class TruncatedNormal:
    mu: float
    sigma: float
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        for name in ("mu", "sigma", "a", "b"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite, got {getattr(self, name)!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if not self.a < self.b:
            raise ValueError(f"need a < b, got a={self.a!r}, b={self.b!r}")

    @cached_property
    def alpha(self) -> float:
        return (self.a - self.mu) / self.sigma

    @cached_property
    def beta(self) -> float:
        return (self.b - self.mu) / self.sigma

    @cached_property
    def log_norm(self) -> float:
        """``log(Phi(beta) - Phi(alpha))``."""
        return special.log_diff_ndtr(self.alpha, self.beta)

    @cached_property
    def mode(self) -> float:
        return min(max(self.mu, self.a), self.b)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    coverage_target: float = 0.9

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"interval needs lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


def log_pdf(d: TruncatedNormal, x: float) -> float:
    """Log-density; ``-inf`` outside ``[a, b]`` (a sentinel, not an error)."""
    if not d.a <= x <= d.b:
        return -math.inf
    z = (x - d.mu) / d.sigma
    return -0.5 * z * z - LOG_SQRT_2PI - math.log(d.sigma) - d.log_norm


def pdf(d: TruncatedNormal, x: float) -> float:
    lp = log_pdf(d, x)
    return 0.0 if lp == -math.inf else math.exp(lp)


def cdf(d: TruncatedNormal, x: float) -> float:
    if x <= d.a:
        return 0.0
    if x >= d.b:
        return 1.0
    z = (x - d.mu) / d.sigma
    if z <= d.alpha:
        return 0.0
    return min(1.0, math.exp(special.log_diff_ndtr(d.alpha, z) - d.log_norm))


def sf(d: TruncatedNormal, x: float) -> float:
    """Survival function ``1 - cdf``, computed without cancellation near ``b``."""
    if x <= d.a:
        return 1.0
    if x >= d.b:
        return 0.0
    z = (x - d.mu) / d.sigma
    if z >= d.beta:
        return 0.0
    return min(1.0, math.exp(special.log_diff_ndtr(z, d.beta) - d.log_norm))


def _reflect(d: TruncatedNormal) -> TruncatedNormal:
    return TruncatedNormal(-d.mu, d.sigma, -d.b, -d.a)


def quantile(d: TruncatedNormal, p: float) -> float:
    """Inverse CDF on ``[a, b]``; ``quantile(0) == a`` and ``quantile(1) == b``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p!r}")
    if p == 0.0:
        return d.a
    if p == 1.0:
        return d.b
    if d.alpha > 0.0:
        # whole support in the upper tail: work on the mirrored distribution
        return -quantile(_reflect(d), 1.0 - p)
    lp_a = special.log_ndtr(d.alpha)
    lp_b = special.log_ndtr(d.beta)
    # log(Phi(alpha) + p * (Phi(beta) - Phi(alpha)))
    log_target = lp_b + math.log(p + (1.0 - p) * math.exp(lp_a - lp_b))
    if d.beta > 0.0 and log_target > math.log(0.5):
        upper = special.std_normal_cdf(-d.beta) + (1.0 - p) * math.exp(d.log_norm)
        z = -special.ndtri_log(math.log(upper))
    else:
        z = special.ndtri_log(log_target)
    return min(max(d.mu + d.sigma * z, d.a), d.b)


def _check_nll_inputs(mu: float, sigma: float, x: float) -> None:
    for name, v in (("mu", mu), ("sigma", sigma), ("x", x)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")


def _nll_parts(mu: float, sigma: float, x: float, a: float, b: float):
    """Value and partial derivatives of the truncated-normal NLL."""
    alpha = (a - mu) / sigma
    beta = (b - mu) / sigma
    log_z = special.log_diff_ndtr(alpha, beta)
    r = (mu - x) / sigma
    value = math.log(sigma) + 0.5 * r * r + log_z + LOG_SQRT_2PI
    # phi(t) / Z in log space so the ratios stay finite far in the tails
    pa = math.exp(special.std_normal_logpdf(alpha) - log_z)
    pb = math.exp(special.std_normal_logpdf(beta) - log_z)
    d_mu = r / sigma + (pa - pb) / sigma
    d_sigma = 1.0 / sigma - r * r / sigma + (alpha * pa - beta * pb) / sigma
    return value, d_mu, d_sigma


def nll(d: TruncatedNormal, x: float) -> float:
    """``-log pdf(d, x)`` as ``log s + (m-x)^2/(2 s^2) + log Z + log sqrt(2 pi)``."""
    _check_nll_inputs(d.mu, d.sigma, x)
    if not d.a <= x <= d.b:
        raise ValueError(f"x={x!r} outside the support [{d.a}, {d.b}]")
    return _nll_parts(d.mu, d.sigma, x, d.a, d.b)[0]


def batch_loss(
    point_estimates: Sequence[float],
    sigmas: Sequence[float],
    labels: Sequence[float],
    a: float = 0.0,
    b: float = 1.0,
) -> float:
    """Summed (not averaged) NLL over a batch.

    Sigmas are used as given; flooring at ``SIGMA_FLOOR`` is the caller's job.
    """
    n = len(point_estimates)
    if n == 0 or len(sigmas) != n or len(labels) != n:
        raise ValueError(
            f"batch_loss needs equal non-empty lengths, got "
            f"{len(point_estimates)}, {len(sigmas)}, {len(labels)}"
        )
    total = 0.0
    for mu, s, f in zip(point_estimates, sigmas, labels):
        total += nll(TruncatedNormal(float(mu), float(s), a, b), float(f))
    return total


def nll_tensor(mu: Tensor, sigma: Tensor, labels, a: float = 0.0, b: float = 1.0) -> Tensor:
    """Element-wise NLL as a differentiable tensor op (same shape as ``mu``)."""
    mu = as_tensor(mu)
    sigma = as_tensor(sigma)
    y = np.asarray(labels, dtype=np.float64).reshape(mu.shape)
    if mu.shape != sigma.shape:
        raise ValueError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    m = mu.data.astype(np.float64).ravel()
    s = sigma.data.astype(np.float64).ravel()
    vals = np.empty(m.size)
    g_mu = np.empty(m.size)
    g_sigma = np.empty(m.size)
    for i, (mi, si, yi) in enumerate(zip(m, s, y.ravel())):
        _check_nll_inputs(mi, si, yi)
        vals[i], g_mu[i], g_sigma[i] = _nll_parts(mi, si, yi, a, b)
    dtype = mu.data.dtype
    g_mu = g_mu.reshape(mu.shape)
    g_sigma = g_sigma.reshape(mu.shape)

    def backward(grad):
        return (grad * g_mu).astype(dtype), (grad * g_sigma).astype(dtype)

    return Tensor.from_op(vals.reshape(mu.shape).astype(dtype), (mu, sigma), backward, "nll")


def batch_loss_tensor(mu: Tensor, sigma: Tensor, labels, a: float = 0.0, b: float = 1.0) -> Tensor:
    """Differentiable version of :func:`batch_loss` (sum over the batch)."""
    return nll_tensor(mu, sigma, labels, a, b).sum()


def interval(d: TruncatedNormal, coverage: float = 0.9) -> Interval:
    """Highest-density interval holding ``coverage`` probability mass.

    The density is unimodal with mode ``clamp(mu, a, b)`` and symmetric about
    ``mu`` before truncation, so every super-level set is
    ``[max(a, mu - t), min(b, mu + t)]``. Ignoring the bounds, the mass of
    ``[mu - t, mu + t]`` is ``(1 - 2 Phi(-t/sigma)) / Z``, which gives ``t`` in
    closed form. Clipping can only lower the mass, so if that window crosses
    a bound the true level set is pinned to that bound (never both, since a
    doubly pinned set has mass 1) and the free end is a quantile.
    """
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"coverage must be in (0, 1), got {coverage!r}")
    mu = d.mu
    z = math.exp(d.log_norm)
    t = -d.sigma * special.ndtri(0.5 * (1.0 - coverage * z))
    if mu - t < d.a:
        return Interval(d.a, quantile(d, coverage), coverage)
    if mu + t > d.b:
        return Interval(quantile(d, 1.0 - coverage), d.b, coverage)
    return Interval(mu - t, mu + t, coverage)


def central_interval(d: TruncatedNormal, coverage: float = 0.9) -> Interval:
    """Equal-tailed interval, for comparison with the HDI."""
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"coverage must be in (0, 1), got {coverage!r}")
    tail = 0.5 * (1.0 - coverage)
    return Interval(quantile(d, tail), quantile(d, 1.0 - tail), coverage)


def _adaptive_simpson(f, lo: float, hi: float, tol: float, max_depth: int = 60) -> float:
    if hi <= lo:
        return 0.0
    f_lo, f_mid, f_hi = f(lo), f(0.5 * (lo + hi)), f(hi)
    whole = (hi - lo) / 6.0 * (f_lo + 4.0 * f_mid + f_hi)
    total = 0.0
    stack = [(lo, hi, f_lo, f_mid, f_hi, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, s, eps, depth = stack.pop()
        m = 0.5 * (a + b)
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm = f(lm)
        frm = f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - s
        if depth >= max_depth or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, 0.5 * eps, depth + 1))
            stack.append((m, b, fm, frm, fb, right, 0.5 * eps, depth + 1))
    return total


def crps(d: TruncatedNormal, x: float, tol: float = 1e-9) -> float:
    """Continuous ranked probability score, ``int (F(y) - 1{y >= x})^2 dy``.

    ``F`` is flat outside ``[a, b]``, so those parts are closed form and only
    ``[a, b]`` is integrated (adaptive Simpson, split at ``x`` and around the
    bulk of the density).
    """
    if not math.isfinite(x):
        raise ValueError(f"x must be finite, got {x!r}")
    outside = max(0.0, d.a - x) + max(0.0, x - d.b)
    cuts = {d.a, d.b}
    for k in (-10.0, -3.0, 0.0, 3.0, 10.0):
        c = d.mu + k * d.sigma
        if d.a < c < d.b:
            cuts.add(c)
    if d.a < x < d.b:
        cuts.add(x)
    pts = sorted(cuts)
    n_pieces = len(pts) - 1
    total = outside
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi <= x:
            total += _adaptive_simpson(lambda y: cdf(d, y) ** 2, lo, hi, tol / n_pieces)
        else:
            total += _adaptive_simpson(lambda y: sf(d, y) ** 2, lo, hi, tol / n_pieces)
    return max(total, 0.0)


def quantile_array(mu, sigma, p, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Vectorised :func:`quantile` over broadcastable ``mu``, ``sigma``, ``p``."""
    mu, sigma, p = np.broadcast_arrays(
        np.asarray(mu, np.float64), np.asarray(sigma, np.float64), np.asarray(p, np.float64)
    )
    shape = mu.shape
    mu, sigma, p = mu.ravel().copy(), sigma.ravel(), p.ravel().copy()
    lo_b = np.full_like(mu, a)
    hi_b = np.full_like(mu, b)
    alpha = (lo_b - mu) / sigma
    flip = alpha > 0.0
    # mirror the upper-tail cases so alpha <= 0 everywhere below
    mu = np.where(flip, -mu, mu)
    p = np.where(flip, 1.0 - p, p)
    lo_b, hi_b = np.where(flip, -hi_b, lo_b), np.where(flip, -lo_b, hi_b)
    alpha = (lo_b - mu) / sigma
    beta = (hi_b - mu) / sigma
    lp_a = special.log_ndtr_array(alpha)
    lp_b = special.log_ndtr_array(beta)
    log_norm = special.log_diff_ndtr_array(alpha, beta)
    with np.errstate(divide="ignore"):
        log_target = lp_b + np.log(p + (1.0 - p) * np.exp(lp_a - lp_b))
    z = np.empty_like(mu)
    upper = (beta > 0.0) & (log_target > math.log(0.5))
    lower = ~upper & (p > 0.0)
    if np.any(upper):
        u = special.std_normal_cdf_array(-beta[upper]) + (1.0 - p[upper]) * np.exp(log_norm[upper])
        z[upper] = -special.ndtri_log_array(np.log(u))
    if np.any(lower):
        z[lower] = special.ndtri_log_array(log_target[lower])
    x = np.clip(mu + sigma * z, lo_b, hi_b)
    x = np.where(p <= 0.0, lo_b, x)
    x = np.where(p >= 1.0, hi_b, x)
    x = np.where(flip, -x, x)
    return x.reshape(shape)


def sample(d: TruncatedNormal, rng_seed: int, n: int) -> np.ndarray:
    """``n`` inverse-CDF draws driven by ``numpy.random.default_rng(rng_seed)``."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    u = np.random.default_rng(rng_seed).random(n)
    if n == 0:
        return np.empty(0)
    return quantile_array(d.mu, d.sigma, u, d.a, d.b)
