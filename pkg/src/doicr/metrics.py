"""Interval quality measures: hard and soft coverage, mean and captured width.

Coverage uses closed bounds, so a target lying exactly on a bound counts as
captured.  Widths are ``upper - lower`` and may be negative when a
lower/upper head produces crossed bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from doicr import autodiff as ad
from doicr.conformal import PredictionInterval
from doicr.errors import ContractError

SOFT_ARG_LIMIT = 500.0


@dataclass(frozen=True)
class IntervalMetrics:
    picp: float
    mpiw: float
    captured_count: int
    mpiw_capt: float
    n: int
    unbounded: bool = False
    crossed: int = 0

    def to_dict(self) -> dict:
        return {
            "picp": self.picp,
            "mpiw": self.mpiw,
            "captured_count": self.captured_count,
            "mpiw_capt": self.mpiw_capt,
            "n": self.n,
            "unbounded": self.unbounded,
            "crossed": self.crossed,
        }


def _unpack(intervals, y=None):
    lower = np.asarray(intervals.lower, dtype=np.float64).ravel()
    upper = np.asarray(intervals.upper, dtype=np.float64).ravel()
    if lower.size == 0:
        raise ContractError("metrics need at least one interval")
    if lower.shape != upper.shape:
        raise ContractError("lower and upper bounds differ in length")
    if y is None:
        return lower, upper
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape != lower.shape:
        raise ContractError(f"{lower.size} intervals but {y.size} targets")
    return lower, upper, y


def captured(intervals, y) -> np.ndarray:
    """Hard indicator ``k_i``: 1 where ``lower_i <= y_i <= upper_i``."""
    lower, upper, y = _unpack(intervals, y)
    return ((y - lower >= 0) & (upper - y >= 0)).astype(np.float64)


def picp(intervals, y) -> float:
    return float(captured(intervals, y).mean())


def mpiw(intervals) -> float:
    lower, upper = _unpack(intervals)
    return float(np.mean(upper - lower))


def mpiw_capt(intervals, y) -> float:
    """Mean width over captured examples; 0 when nothing is captured."""
    lower, upper, y = _unpack(intervals, y)
    k = captured(intervals, y)
    c = k.sum()
    return float(((upper - lower) * k).sum() / max(c, 1.0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, -SOFT_ARG_LIMIT, SOFT_ARG_LIMIT)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def picp_soft(intervals, y, gamma: float) -> float:
    """Coverage with each Heaviside step replaced by ``sigmoid(gamma * .)``."""
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    lower, upper, y = _unpack(intervals, y)
    return float(np.mean(_sigmoid(gamma * (y - lower)) * _sigmoid(gamma * (upper - y))))


def picp_soft_on_tape(lower: ad.Value, upper: ad.Value, y: np.ndarray, gamma: float) -> ad.Value:
    """Differentiable soft coverage of ``n x 1`` bound columns."""
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    y_col = lower.tape.const(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    below = ad.sigmoid(ad.scale(gamma, y_col - lower))
    above = ad.sigmoid(ad.scale(gamma, upper - y_col))
    return ad.mean(below * above)


def evaluate(intervals: PredictionInterval, y) -> IntervalMetrics:
    lower, upper, y = _unpack(intervals, y)
    k = captured(intervals, y)
    unbounded = bool(np.any(np.isinf(lower)) or np.any(np.isinf(upper)))
    with np.errstate(invalid="ignore"):
        width = float(np.mean(upper - lower))
        capt = mpiw_capt(intervals, y)
    return IntervalMetrics(
        picp=float(k.mean()),
        mpiw=width,
        captured_count=int(k.sum()),
        mpiw_capt=capt,
        n=int(y.size),
        unbounded=unbounded,
        crossed=int(np.sum(upper < lower)),
    )
