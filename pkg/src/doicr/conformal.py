"""Normalized nonconformity scores, the conformal quantile, and intervals.

The quantile is the ``ceil((1 - eps) * (n + 1))``-th smallest calibration
score, which gives exact finite-sample validity.  When that rank exceeds
``n`` the quantile is infinite and intervals are unbounded.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from doicr import autodiff as ad
from doicr.errors import ContractError
from doicr.network import predict

_SNAP = 1e-9


def _snap(x: float) -> float:
    # (1 - 0.1) * 10 == 9.000000000000002 in binary floating point
    r = round(x)
    return float(r) if abs(x - r) < _SNAP else x


def quantile_rank(n: int, epsilon: float) -> int:
    """1-based rank of the conformal quantile among ``n`` sorted scores."""
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon must lie in (0, 1), got {epsilon}")
    return math.ceil(_snap((1.0 - epsilon) * (n + 1)))


def min_calibration_size(epsilon: float) -> int:
    """Smallest calibration size giving a finite quantile at ``epsilon``."""
    n = 1
    while quantile_rank(n, epsilon) > n:
        n += 1
    return n


@dataclass(frozen=True)
class ConformalQuantile:
    q: float
    index: int | None
    epsilon: float
    rank: int
    n: int

    @property
    def finite(self) -> bool:
        return self.index is not None


@dataclass(frozen=True)
class NcmScores:
    alphas: np.ndarray
    source_size: int

    def __post_init__(self):
        if self.alphas.shape != (self.source_size,):
            raise ContractError("alphas must be a flat array of length source_size")
        if not np.all(np.isfinite(self.alphas)) or np.any(self.alphas < 0):
            raise ContractError("nonconformity scores must be finite and nonnegative")


@dataclass(frozen=True)
class PredictionInterval:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def unbounded(self) -> bool:
        return bool(np.any(np.isinf(self.lower)) or np.any(np.isinf(self.upper)))

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def __len__(self) -> int:
        return len(self.lower)


def ncm(y, m, sigma):
    """``|y - m| / sigma``.

    With tape Values for ``m``/``sigma`` the result is differentiable;
    with arrays it returns a flat numpy array.
    """
    sig = sigma.data if isinstance(sigma, ad.Value) else np.asarray(sigma, dtype=np.float64)
    if np.any(sig <= 0):
        raise ContractError("sigma must be strictly positive")
    if isinstance(m, ad.Value) or isinstance(sigma, ad.Value):
        tape = m.tape if isinstance(m, ad.Value) else sigma.tape
        y_col = tape.const(np.asarray(y, dtype=np.float64).reshape(-1, 1))
        return ad.absolute(y_col - m) / sigma
    y = np.asarray(y, dtype=np.float64)
    return np.abs(y - np.asarray(m, dtype=np.float64)) / sig


def conformal_quantile(alphas, epsilon: float) -> ConformalQuantile:
    """Select the conformal quantile; ties resolve to the lowest index."""
    a = np.asarray(alphas, dtype=np.float64).ravel()
    n = a.size
    if n == 0:
        raise ContractError("conformal quantile of an empty score set")
    k = quantile_rank(n, epsilon)
    if k > n:
        return ConformalQuantile(math.inf, None, epsilon, k, n)
    q = float(np.sort(a, kind="stable")[k - 1])
    index = int(np.flatnonzero(a == q)[0])
    return ConformalQuantile(q, index, epsilon, k, n)


def quantile_on_tape(alphas: ad.Value, epsilon: float) -> tuple[ad.Value | None, ConformalQuantile]:
    """Differentiable quantile: gradient reaches only the selected score."""
    cq = conformal_quantile(alphas.data, epsilon)
    if not cq.finite:
        return None, cq
    return ad.gather(alphas, cq.index), cq


def predict_interval(m, sigma, q: float) -> PredictionInterval:
    """``[m - q sigma, m + q sigma]`` per example."""
    m = np.asarray(m, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if m.shape != sigma.shape:
        raise ContractError("m and sigma must have the same length")
    if q < 0 or math.isnan(q):
        raise ContractError(f"quantile must be nonnegative, got {q}")
    if math.isinf(q):
        warnings.warn(
            "interval unbounded: calibration too small for this epsilon",
            RuntimeWarning,
            stacklevel=2,
        )
        return PredictionInterval(np.full_like(m, -np.inf), np.full_like(m, np.inf))
    half = q * sigma
    return PredictionInterval(m - half, m + half)


def prediction_set_oracle(x, y_grid, calibration_alphas, epsilon: float, params) -> np.ndarray:
    """Grid points kept by the p-value rule of an inductive conformal predictor.

    ``y`` is kept when ``(#{alpha_j >= A(x, y)} + 1) / (n + 1) > epsilon``.
    Counting is done directly; no quantile is formed.  Returns a boolean mask
    over ``y_grid``.
    """
    cal = np.asarray(calibration_alphas, dtype=np.float64).ravel()
    n = cal.size
    if n == 0:
        raise ContractError("oracle needs a nonempty calibration set")
    grid = np.asarray(y_grid, dtype=np.float64).ravel()
    if np.any(np.diff(grid) <= 0) or not np.all(np.isfinite(grid)):
        raise ContractError("y_grid must be finite and strictly ascending")
    out = predict(params, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    m, sigma = out["m"][0], out["sigma"][0]
    scores = np.abs(grid - m) / sigma
    at_least = (cal[None, :] >= scores[:, None]).sum(axis=1)
    threshold = _snap(epsilon * (n + 1))
    return (at_least + 1) > threshold
