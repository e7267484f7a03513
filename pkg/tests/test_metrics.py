import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siwnet import metrics
from siwnet.metrics import EvalReport, Static, evaluate
from siwnet.probdist import Interval, TruncatedNormal, crps, interval, quantile_array


def test_mae_rmse_examples():
    assert metrics.mae([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert metrics.rmse([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert metrics.mae([0.1, 0.3], [0.0, 0.0]) == pytest.approx(0.2)
    assert metrics.rmse([0.1, 0.3], [0.0, 0.0]) == pytest.approx(0.22361, abs=1e-5)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30), st.randoms())
def test_mae_rmse_permutation_invariant(pairs, rnd):
    p, y = zip(*pairs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    ps, ys = zip(*shuffled)
    assert metrics.mae(ps, ys) == pytest.approx(metrics.mae(p, y), abs=1e-15)
    assert metrics.rmse(ps, ys) == pytest.approx(metrics.rmse(p, y), abs=1e-15)


def test_mae_errors():
    with pytest.raises(ValueError):
        metrics.mae([], [])
    with pytest.raises(ValueError):
        metrics.rmse([0.1], [0.1, 0.2])


@pytest.mark.parametrize("x,want", [(0.4, 0.4), (0.1, 2.4), (0.7, 2.4)])
def test_interval_score_examples(x, want):
    assert metrics.interval_score(Interval(0.2, 0.6), x, 0.1) == pytest.approx(want)


@given(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(-1, 2))
def test_interval_score_at_least_width(lo, w, x):
    iv = Interval(lo, lo + w)
    s = metrics.interval_score(iv, x)
    assert s >= iv.width - 1e-15
    if iv.contains(x):
        assert s == iv.width
    else:
        assert s == pytest.approx(iv.width + 20.0 * max(iv.lo - x, x - iv.hi), rel=1e-12)


def test_e90_examples():
    assert metrics.e90_threshold([i / 100 for i in range(1, 11)]) == pytest.approx(0.09)
    assert metrics.e90_threshold([0.3] * 7) == 0.3
    assert metrics.e90_threshold([0.5]) == 0.5
    with pytest.raises(ValueError):
        metrics.e90_threshold([])


def test_e90_is_order_free():
    errs = list(np.random.default_rng(0).random(37))
    assert metrics.e90_threshold(errs) == metrics.e90_threshold(sorted(errs, reverse=True))
    assert metrics.e90_threshold(errs) == sorted(errs)[math.ceil(0.9 * 37) - 1]


@pytest.mark.parametrize("p,e,lo,hi", [(0.5, 0.1, 0.4, 0.6), (0.05, 0.2, 0.0, 0.25), (0.95, 0.2, 0.75, 1.0)])
def test_static_interval(p, e, lo, hi):
    iv = metrics.static_interval(p, e)
    assert (iv.lo, iv.hi) == (pytest.approx(lo), pytest.approx(hi))
    assert iv.coverage_target == 0.9


def test_static_perfect_forecast():
    y = [0.1, 0.5, 0.9]
    r = evaluate([(v, None) for v in y], y, Static(0.0))
    assert (r.mae, r.avg_interval_score, r.coverage) == (0.0, 0.0, 1.0)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=50), st.floats(0, 0.5))
def test_static_crps_equals_mae_exactly(pairs, e90):
    p, y = zip(*pairs)
    r = evaluate([(v, None) for v in p], y, Static(e90))
    assert r.avg_crps == r.mae


def test_distributional_matches_manual_scoring():
    rng = np.random.default_rng(5)
    mu = rng.uniform(0, 1, 100)
    sig = rng.uniform(0.02, 0.3, 100)
    y = rng.uniform(0, 1, 100)
    r = evaluate(list(zip(mu, sig)), y)
    # independent per-sample loop, plain sums
    iss, cr, hit = 0.0, 0.0, 0
    for m, s, t in zip(mu, sig, y):
        d = TruncatedNormal(m, s)
        iv = interval(d, 0.9)
        w = iv.hi - iv.lo
        pen = 20.0 * max(iv.lo - t, 0.0) + 20.0 * max(t - iv.hi, 0.0)
        iss += w + pen
        cr += crps(d, t)
        hit += iv.lo <= t <= iv.hi
    assert r.avg_interval_score == pytest.approx(iss / 100, rel=1e-12)
    assert r.avg_crps == pytest.approx(cr / 100, rel=1e-12)
    assert r.coverage == hit / 100
    assert r.mae == pytest.approx(np.mean(np.abs(mu - y)), rel=1e-12)


def test_evaluate_permutation_invariant():
    rng = np.random.default_rng(6)
    preds = list(zip(rng.uniform(0, 1, 40), rng.uniform(0.05, 0.2, 40)))
    y = list(rng.uniform(0, 1, 40))
    perm = rng.permutation(40)
    a = evaluate(preds, y)
    b = evaluate([preds[i] for i in perm], [y[i] for i in perm])
    for k in ("mae", "rmse", "avg_interval_score", "avg_crps", "coverage"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-12)


def test_mode_payload_mismatch():
    with pytest.raises(ValueError):
        evaluate([(0.5, 0.1)], [0.5], Static(0.1))
    with pytest.raises(ValueError):
        evaluate([(0.5, None)], [0.5])
    with pytest.raises(ValueError):
        evaluate([(0.5, 0.1)], [0.5], mode="bogus")


def test_report_json_round_trip():
    r = evaluate([(0.3, 0.1), (0.6, 0.2)], [0.35, 0.1])
    back = EvalReport.from_dict(json.loads(r.to_json()))
    assert back == r
    with pytest.raises(ValueError):
        EvalReport.from_dict({"mae": 1.0})


# ---------------------------------------------------------------- statistical properties


def _draws(n, seed):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.2, 0.8, n)
    sig = rng.uniform(0.03, 0.12, n)
    y = quantile_array(mu, sig, rng.random(n))
    return mu, sig, y


def test_calibrated_forecasts_cover_ninety_percent():
    mu, sig, y = _draws(10_000, 0)
    hits = [interval(TruncatedNormal(m, s)).contains(t) for m, s, t in zip(mu, sig, y)]
    assert 0.89 <= np.mean(hits) <= 0.91


def test_true_forecast_beats_perturbed_ones():
    mu, sig, y = _draws(10_000, 1)

    def scores(m_shift, s_scale):
        return np.array(
            [metrics.interval_score(interval(TruncatedNormal(m + m_shift, s * s_scale)), t) for m, s, t in zip(mu, sig, y)]
        )

    truth = scores(0.0, 1.0)
    for shift, scale in [(0.05, 1.0), (-0.05, 1.0), (0.0, 0.6), (0.0, 1.6), (0.03, 1.3)]:
        diff = scores(shift, scale) - truth
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        assert diff.mean() > 3 * se, (shift, scale, diff.mean(), se)
