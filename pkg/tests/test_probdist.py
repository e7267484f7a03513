import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate, stats

from siwnet import probdist as pd
from siwnet.probdist import TruncatedNormal
from siwnet.tensor import Tensor, precision

mus = st.floats(-0.5, 1.5)
sigmas = st.floats(0.01, 2.0)
xs = st.floats(0.0, 1.0)


def scipy_tn(mu, sigma, a=0.0, b=1.0):
    return stats.truncnorm((a - mu) / sigma, (b - mu) / sigma, loc=mu, scale=sigma)


# ---------------------------------------------------------------- density


def test_pdf_at_mode_of_narrow_distribution():
    # truncation mass is 1 - 2e-7, so the peak is essentially 1 / (0.1 sqrt(2 pi))
    assert pd.pdf(TruncatedNormal(0.5, 0.1), 0.5) == pytest.approx(3.98942, abs=1e-5)


def test_pdf_zero_outside_support():
    d = TruncatedNormal(0.5, 0.2)
    assert pd.pdf(d, -0.01) == 0.0
    assert pd.pdf(d, 1.01) == 0.0
    assert pd.log_pdf(d, 2.0) == -math.inf


@pytest.mark.parametrize("mu", [-3.0, -0.5, 0.0, 0.3, 0.5, 1.0, 1.7, 4.0])
@pytest.mark.parametrize("sigma", [0.005, 0.05, 0.3, 1.0, 5.0])
def test_pdf_integrates_to_one(mu, sigma):
    d = TruncatedNormal(mu, sigma)
    # when mu is outside [0, 1] the mass piles up within ~sigma^2/|distance| of the bound
    dist = max(0.0 - mu, mu - 1.0, 0.0)
    ell = min(sigma, sigma**2 / dist) if dist > 0 else sigma
    pts = [min(1.0, max(0.0, mu + k * sigma)) for k in (-5, 0, 5)]
    pts += [e for k in (1, 5, 20, 60) for e in (k * ell, 1.0 - k * ell) if 0.0 < e < 1.0]
    val, _ = integrate.quad(lambda y: pd.pdf(d, y), 0.0, 1.0, points=pts, epsabs=1e-13, epsrel=1e-13, limit=400)
    assert val == pytest.approx(1.0, abs=1e-8)


@given(mus, sigmas, xs)
@settings(max_examples=200, deadline=None)
def test_pdf_and_cdf_match_scipy(mu, sigma, x):
    ref = scipy_tn(mu, sigma)
    d = TruncatedNormal(mu, sigma)
    assert pd.pdf(d, x) == pytest.approx(ref.pdf(x), rel=1e-8, abs=1e-12)
    assert pd.cdf(d, x) == pytest.approx(ref.cdf(x), rel=1e-8, abs=1e-12)


def test_far_outside_mean_stays_finite():
    d = TruncatedNormal(-5.0, 0.01)
    assert math.isfinite(pd.log_pdf(d, 0.0))
    assert math.isfinite(pd.nll(d, 0.5))
    # density decreasing away from the pinned mode at 0
    assert pd.log_pdf(d, 0.0) > pd.log_pdf(d, 0.001)


# ---------------------------------------------------------------- quantiles


@given(mus, sigmas, st.floats(1e-6, 1 - 1e-6))
@settings(max_examples=300, deadline=None)
def test_cdf_of_quantile(mu, sigma, p):
    d = TruncatedNormal(mu, sigma)
    assert pd.cdf(d, pd.quantile(d, p)) == pytest.approx(p, abs=1e-9)


def test_quantile_endpoints():
    d = TruncatedNormal(0.4, 0.2)
    assert pd.quantile(d, 0.0) == 0.0
    assert pd.quantile(d, 1.0) == 1.0
    with pytest.raises(ValueError):
        pd.quantile(d, 1.5)


def test_quantile_array_matches_scalar():
    rng = np.random.default_rng(3)
    mu = rng.uniform(-0.5, 1.5, 300)
    sigma = rng.uniform(0.005, 1.0, 300)
    p = rng.random(300)
    got = pd.quantile_array(mu, sigma, p)
    want = [pd.quantile(TruncatedNormal(m, s), q) for m, s, q in zip(mu, sigma, p)]
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_sample_is_reproducible_and_inside():
    d = TruncatedNormal(0.9, 0.3)
    a = pd.sample(d, 7, 1000)
    assert np.array_equal(a, pd.sample(d, 7, 1000))
    assert a.min() >= 0.0 and a.max() <= 1.0
    # Kolmogorov-Smirnov against scipy: loose, just a sanity check
    assert stats.kstest(a, scipy_tn(0.9, 0.3).cdf).pvalue > 1e-3


@pytest.mark.parametrize("mu,s", [(0.615, 0.075), (-0.2, 0.3), (1.1, 0.05), (0.5, 2.0)])
def test_sample_equals_scipy_ppf_on_same_uniforms(mu, s):
    u = np.random.default_rng(11).random(20_000)
    np.testing.assert_allclose(pd.sample(TruncatedNormal(mu, s), 11, 20_000), scipy_tn(mu, s).ppf(u), atol=1e-12)


# ---------------------------------------------------------------- loss


@given(mus, sigmas, xs)
@settings(max_examples=200, deadline=None)
def test_exp_neg_nll_is_pdf(mu, sigma, x):
    d = TruncatedNormal(mu, sigma)
    assert math.exp(-pd.nll(d, x)) == pytest.approx(pd.pdf(d, x), rel=1e-10)


def test_nll_gradient_closed_form_vs_finite_difference():
    rng = np.random.default_rng(11)
    for _ in range(100):
        mu, sigma, x = rng.uniform(-0.3, 1.3), rng.uniform(0.02, 1.0), rng.random()
        _, g_mu, g_sigma = pd._nll_parts(mu, sigma, x, 0.0, 1.0)
        h = 1e-6
        fd_mu = (pd.nll(TruncatedNormal(mu + h, sigma), x) - pd.nll(TruncatedNormal(mu - h, sigma), x)) / (2 * h)
        hs = h * sigma
        fd_sigma = (pd.nll(TruncatedNormal(mu, sigma + hs), x) - pd.nll(TruncatedNormal(mu, sigma - hs), x)) / (2 * hs)
        assert g_mu == pytest.approx(fd_mu, rel=1e-5, abs=1e-6)
        assert g_sigma == pytest.approx(fd_sigma, rel=1e-5, abs=1e-6)


def test_batch_loss_is_sum_of_nll():
    mus, sigs, ys = [0.2, 0.5, 0.9], [0.1, 0.3, 0.05], [0.25, 0.1, 1.0]
    want = sum(pd.nll(TruncatedNormal(m, s), y) for m, s, y in zip(mus, sigs, ys))
    assert pd.batch_loss(mus, sigs, ys) == pytest.approx(want, rel=1e-14)


def test_batch_loss_length_mismatch():
    with pytest.raises(ValueError):
        pd.batch_loss([0.1, 0.2], [0.1], [0.3, 0.4])


def test_loss_at_floor_is_finite():
    assert math.isfinite(pd.batch_loss([0.0], [pd.SIGMA_FLOOR], [1.0]))


def test_nll_rejects_bad_inputs():
    with pytest.raises(ValueError):
        pd.nll(TruncatedNormal(0.5, 0.1), 1.2)
    with pytest.raises(ValueError):
        TruncatedNormal(0.5, 0.0)
    with pytest.raises(ValueError):
        TruncatedNormal(float("nan"), 0.1)


def test_batch_loss_tensor_gradients_match_closed_form():
    with precision(np.float64):
        mu = Tensor(np.array([0.2, 0.7, 1.1]), requires_grad=True)
        sigma = Tensor(np.array([0.05, 0.3, 0.2]), requires_grad=True)
        y = [0.25, 0.0, 0.95]
        loss = pd.batch_loss_tensor(mu, sigma, y)
        loss.backward()
    assert float(loss.data) == pytest.approx(pd.batch_loss(mu.data, sigma.data, y), rel=1e-14)
    for i in range(3):
        _, gm, gs = pd._nll_parts(mu.data[i], sigma.data[i], y[i], 0.0, 1.0)
        assert mu.grad[i] == pytest.approx(gm, rel=1e-14)
        assert sigma.grad[i] == pytest.approx(gs, rel=1e-14)


# ---------------------------------------------------------------- intervals


def grid_hdi_width(d, coverage, n=400_001):
    """Shortest-interval oracle: smallest window over a dense CDF grid."""
    y = np.linspace(0.0, 1.0, n)
    F = scipy_tn(d.mu, d.sigma).cdf(y)
    j = np.searchsorted(F, F + coverage)
    ok = j < n
    return float(np.min(y[j[ok]] - y[:n][ok]))


def test_symmetric_hdi_equals_central():
    d = TruncatedNormal(0.5, 0.1)
    iv = pd.interval(d, 0.9)
    assert iv.lo == pytest.approx(0.5 - 1.6448536 * 0.1, abs=1e-6)
    assert iv.hi == pytest.approx(0.5 + 1.6448536 * 0.1, abs=1e-6)


def test_pinned_hdi_starts_at_bound():
    d = TruncatedNormal(0.02, 0.2)
    iv = pd.interval(d, 0.9)
    assert iv.lo == 0.0
    assert pd.cdf(d, iv.hi) == pytest.approx(0.9, abs=1e-10)


@given(mus, st.floats(0.01, 1.0), st.floats(0.5, 0.99))
@settings(max_examples=200, deadline=None)
def test_hdi_mass_and_equal_density(mu, sigma, cov):
    d = TruncatedNormal(mu, sigma)
    iv = pd.interval(d, cov)
    assert pd.cdf(d, iv.hi) - pd.cdf(d, iv.lo) == pytest.approx(cov, abs=1e-8)
    if iv.lo > 0.0 and iv.hi < 1.0:
        assert pd.pdf(d, iv.lo) == pytest.approx(pd.pdf(d, iv.hi), rel=1e-6)


@pytest.mark.parametrize("mu,sigma", [(0.02, 0.2), (0.97, 0.1), (-0.4, 0.5), (1.3, 0.3), (0.1, 0.8)])
def test_hdi_width_matches_grid_oracle(mu, sigma):
    d = TruncatedNormal(mu, sigma)
    assert pd.interval(d, 0.9).width == pytest.approx(grid_hdi_width(d, 0.9), abs=1e-4)


def test_hdi_no_wider_than_central():
    for mu, sigma in [(0.1, 0.3), (0.8, 0.2), (0.5, 0.4)]:
        d = TruncatedNormal(mu, sigma)
        assert pd.interval(d).width <= pd.central_interval(d).width + 1e-12


# ---------------------------------------------------------------- CRPS


def crps_quad(mu, sigma, x):
    ref = scipy_tn(mu, sigma)
    lo, _ = integrate.quad(lambda y: ref.cdf(y) ** 2, 0.0, x, epsabs=1e-13, limit=200) if x > 0 else (0.0, 0)
    hi, _ = integrate.quad(lambda y: ref.sf(y) ** 2, x, 1.0, epsabs=1e-13, limit=200) if x < 1 else (0.0, 0)
    return lo + hi


@pytest.mark.parametrize(
    "mu,sigma,x",
    [(0.5, 0.1, 0.5), (0.5, 0.1, 0.9), (0.05, 0.2, 0.0), (0.9, 0.02, 0.85), (-0.2, 0.4, 0.3), (1.4, 0.3, 1.0)],
)
def test_crps_matches_scipy_quadrature(mu, sigma, x):
    assert pd.crps(TruncatedNormal(mu, sigma), x) == pytest.approx(crps_quad(mu, sigma, x), abs=1e-9)


def test_crps_uniform_limit():
    # sigma -> inf: the truncated normal is uniform on [0, 1]; CRPS at 0.5 is 1/12
    assert pd.crps(TruncatedNormal(0.5, 1e4), 0.5) == pytest.approx(1 / 12, abs=1e-4)


def test_crps_point_mass_limit_is_absolute_error():
    assert pd.crps(TruncatedNormal(0.3, 1e-6), 0.7) == pytest.approx(0.4, abs=1e-5)


@given(mus, sigmas, xs)
@settings(max_examples=100, deadline=None)
def test_crps_non_negative(mu, sigma, x):
    assert pd.crps(TruncatedNormal(mu, sigma), x) >= 0.0


def test_crps_outside_support_adds_distance():
    d = TruncatedNormal(0.5, 0.2)
    assert pd.crps(d, 1.5) == pytest.approx(pd.crps(d, 1.0) + 0.5, abs=1e-12)
