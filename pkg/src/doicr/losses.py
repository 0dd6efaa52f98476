"""Training objectives for DOICR and the three baselines.

Every loss is built on an :class:`~doicr.autodiff.Tape` so the trainer can
call ``tape.backward`` on the returned scalar.  Losses that use a network take
``leaves`` from :func:`doicr.network.bind`; omitting them evaluates the loss
with the parameters held constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from doicr import autodiff as ad
from doicr.conformal import PredictionInterval, ncm, quantile_on_tape
from doicr.errors import ConfigurationError, ContractError
from doicr.metrics import captured, picp_soft_on_tape
from doicr.network import ModelParams, mlp_forward

METHODS = ("doicr", "qd_soft", "scpo", "traditional")
RESIDUAL_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.1
    lam: float = 0.01
    gamma: float = 160.0
    method: str = "doicr"
    scpo_literal: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ContractError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.lam < 0:
            raise ContractError("lambda must be nonnegative")
        if self.gamma <= 0:
            raise ContractError("gamma must be positive")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")


def _tape_for(tape, leaves):
    if tape is not None:
        return tape
    if leaves:
        return next(iter(leaves.values())).tape
    return ad.Tape()


def _too_small(n: int, epsilon: float) -> ConfigurationError:
    return ConfigurationError(
        f"calibration subset too small for epsilon={epsilon}: {n} scores give an infinite quantile"
    )


def loss_doicr(
    params: ModelParams,
    X1,
    X2,
    y2,
    epsilon: float,
    tape: ad.Tape | None = None,
    leaves=None,
) -> ad.Value:
    """Embedded-ICP interval width, ``2 q mean(sigma over D1)``.

    ``q`` is the conformal quantile of the normalized scores of the embedded
    calibration set ``(X2, y2)``; its gradient reaches only the selected
    score.  Targets of the proper-training batch ``X1`` are not used.
    """
    tape = _tape_for(tape, leaves)
    if len(X1) == 0:
        raise ContractError("D1 batch is empty")
    out1 = mlp_forward(params, X1, tape, leaves)
    out2 = mlp_forward(params, X2, tape, leaves)
    alphas = ncm(y2, out2.m, out2.sigma)
    q, cq = quantile_on_tape(alphas, epsilon)
    if q is None:
        raise _too_small(cq.n, epsilon)
    return ad.scale(2.0, q * ad.mean(out1.sigma))


def loss_qd_soft(lower: ad.Value, upper: ad.Value, y, config: LossConfig) -> ad.Value:
    """Captured width plus a squared hinge on soft coverage.

    The capture indicators are treated as constants.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.size
    if n == 0:
        raise ContractError("QD-soft loss needs at least one example")
    eps = config.epsilon
    tape = lower.tape
    k = captured(PredictionInterval(lower.data, upper.data), y)
    tape.note_branch("captured", k.astype(np.int8))
    c = max(k.sum(), 1.0)
    width_capt = ad.scale(1.0 / c, ad.total((upper - lower) * tape.const(k.reshape(-1, 1))))
    soft = picp_soft_on_tape(lower, upper, y, config.gamma)
    shortfall = ad.relu(ad.sub(1.0 - eps, soft))
    penalty = ad.scale(config.lam * n / (eps * (1.0 - eps)), ad.square(shortfall))
    return width_capt + penalty


def loss_scpo(
    params: ModelParams,
    X,
    y,
    config: LossConfig,
    tape: ad.Tape | None = None,
    leaves=None,
) -> ad.Value:
    """Surrogate conformal loss on a batch.

    Intervals use the conformal quantile of the batch's own scores.  The
    default objective is ``((1 - eps) - PICP_soft)^2 + lam * MPIW``; with
    ``config.scpo_literal`` it is ``PICP_soft + lam * MPIW``.
    """
    tape = _tape_for(tape, leaves)
    out = mlp_forward(params, X, tape, leaves)
    alphas = ncm(y, out.m, out.sigma)
    q, cq = quantile_on_tape(alphas, config.epsilon)
    if q is None:
        raise _too_small(cq.n, config.epsilon)
    half = q * out.sigma
    soft = picp_soft_on_tape(out.m - half, out.m + half, y, config.gamma)
    width = ad.scale(2.0, q * ad.mean(out.sigma))
    if config.scpo_literal:
        return soft + ad.scale(config.lam, width)
    return ad.square(ad.sub(1.0 - config.epsilon, soft)) + ad.scale(config.lam, width)


def loss_mse(pred: ad.Value, target) -> ad.Value:
    t = pred.tape.const(np.asarray(target, dtype=np.float64).reshape(-1, 1))
    return ad.mean(ad.square(pred - t))


def log_residual_target(y, m) -> np.ndarray:
    """Regression target for the scale model, ``ln(|y - m| + 1e-6)``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    m = np.asarray(m, dtype=np.float64).ravel()
    return np.log(np.abs(y - m) + RESIDUAL_FLOOR)


def loss_traditional(
    params_m: ModelParams,
    params_s: ModelParams,
    X,
    y,
    leaves_m=None,
    leaves_s=None,
) -> tuple[ad.Value, ad.Value]:
    """Stage-1 MSE of the point model and stage-2 MSE of the log-residual model.

    The stage-2 target is computed from the current point model without
    gradient, so the two losses live on separate tapes.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    tape_m = _tape_for(None, leaves_m)
    m = mlp_forward(params_m, X, tape_m, leaves_m).first
    stage1 = loss_mse(m, y)
    tape_s = _tape_for(None, leaves_s)
    s = mlp_forward(params_s, X, tape_s, leaves_s).first
    stage2 = loss_mse(s, log_residual_target(y, m.data))
    return stage1, stage2
