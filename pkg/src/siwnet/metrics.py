"""Point and probabilistic forecast scores.

All averages are per-sample means accumulated in input order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

from .probdist import Interval, TruncatedNormal, crps, interval

ALPHA_90 = 0.10


def _check_pairs(preds: Sequence[float], labels: Sequence[float]) -> None:
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(preds) == 0:
        raise ValueError("need at least one prediction")


def mae(preds: Sequence[float], labels: Sequence[float]) -> float:
    _check_pairs(preds, labels)
    return math.fsum(abs(float(p) - float(y)) for p, y in zip(preds, labels)) / len(preds)


def rmse(preds: Sequence[float], labels: Sequence[float]) -> float:
    _check_pairs(preds, labels)
    return math.sqrt(math.fsum((float(p) - float(y)) ** 2 for p, y in zip(preds, labels)) / len(preds))


def interval_score(iv: Interval, x: float, alpha: float = ALPHA_90) -> float:
    """Winkler score: width plus ``2/alpha`` times any excursion of ``x`` outside."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    score = iv.hi - iv.lo
    if x < iv.lo:
        score += 2.0 / alpha * (iv.lo - x)
    elif x > iv.hi:
        score += 2.0 / alpha * (x - iv.hi)
    return score


def e90_threshold(abs_errors: Sequence[float]) -> float:
    """Nearest-rank 90th percentile: the ``ceil(0.9 n)``-th smallest value."""
    if len(abs_errors) == 0:
        raise ValueError("need at least one error")
    errs = sorted(float(e) for e in abs_errors)
    if errs[0] < 0:
        raise ValueError("absolute errors must be non-negative")
    rank = math.ceil(round(0.9 * len(errs), 9))
    return errs[max(rank, 1) - 1]


def static_interval(point: float, e90: float) -> Interval:
    """``[point - e90, point + e90]`` clamped to the friction range [0, 1]."""
    if e90 < 0:
        raise ValueError(f"e90 must be >= 0, got {e90}")
    lo = max(0.0, point - e90)
    hi = min(1.0, point + e90)
    if lo > hi:  # point outside [0, 1] further than e90
        lo = hi = min(1.0, max(0.0, point))
    return Interval(lo, hi, 0.9)


@dataclass(frozen=True)
class EvalReport:
    mae: float
    rmse: float
    avg_interval_score: float
    avg_crps: float
    coverage: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        keys = {"mae", "rmse", "avg_interval_score", "avg_crps", "coverage", "n"}
        if set(d) != keys:
            raise ValueError(f"EvalReport needs exactly the keys {sorted(keys)}, got {sorted(d)}")
        return cls(**{k: (int(d[k]) if k == "n" else float(d[k])) for k in keys})


@dataclass(frozen=True)
class Static:
    """Evaluation mode: fixed half-width ``e90`` around each point estimate."""

    e90: float


DISTRIBUTIONAL = "distributional"


def evaluate(predictions, labels: Sequence[float], mode=DISTRIBUTIONAL, coverage: float = 0.9) -> EvalReport:
    """Score ``(point, sigma)`` predictions against labels.

    ``mode`` is ``"distributional"`` (each prediction is a truncated normal on
    [0, 1] scored on its ``coverage`` HDI and by CRPS) or ``Static(e90)``
    (sigma must be ``None``; CRPS of a point forecast is its absolute error).
    """
    preds = list(predictions)
    labels = [float(y) for y in labels]
    _check_pairs(preds, labels)
    alpha = 1.0 - coverage
    points = [float(p) for p, _ in preds]
    is_scores, crps_scores, hits = [], [], 0
    if isinstance(mode, Static):
        if any(s is not None for _, s in preds):
            raise ValueError("static mode takes point-only predictions (sigma must be None)")
        for p, y in zip(points, labels):
            iv = static_interval(p, mode.e90)
            is_scores.append(interval_score(iv, y, alpha))
            hits += iv.contains(y)
        avg_crps = mae(points, labels)
    elif mode == DISTRIBUTIONAL:
        if any(s is None for _, s in preds):
            raise ValueError("distributional mode needs a sigma for every prediction")
        for (p, s), y in zip(preds, labels):
            d = TruncatedNormal(float(p), float(s), 0.0, 1.0)
            iv = interval(d, coverage)
            is_scores.append(interval_score(iv, y, alpha))
            crps_scores.append(crps(d, y))
            hits += iv.contains(y)
        avg_crps = math.fsum(crps_scores) / len(crps_scores)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    n = len(labels)
    return EvalReport(
        mae=mae(points, labels),
        rmse=rmse(points, labels),
        avg_interval_score=math.fsum(is_scores) / n,
        avg_crps=avg_crps,
        coverage=hits / n,
        n=n,
    )
