"""Training loops, test-time ICP, and hyperparameter grid search."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from doicr import autodiff as ad
from doicr.conformal import (
    PredictionInterval,
    conformal_quantile,
    min_calibration_size,
    ncm,
    predict_interval,
    quantile_rank,
)
from doicr.errors import ConfigurationError, ContractError, NumericError
from doicr.losses import (
    LossConfig,
    log_residual_target,
    loss_doicr,
    loss_mse,
    loss_qd_soft,
    loss_scpo,
)
from doicr.metrics import IntervalMetrics, evaluate, mpiw, picp
from doicr.network import S_CLAMP, ModelParams, NetConfig, bind, init_params, mlp_forward, predict
from doicr.optim import OPTIMIZERS, clip_grad_norm, make_optimizer

log = logging.getLogger(__name__)

DEFAULT_GRID = {
    "learning_rate": [0.0001, 0.001, 0.01, 0.1],
    "weight_decay": [0.0, 0.0001, 0.001],
    "batch_size": [16, 32, 64, 128],
}
BASELINES = ("qd_soft", "scpo", "traditional")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 1000
    optimizer: str = "adamw"
    embedded_calib_fraction: float = 0.25
    fixed_embedded_split: bool = False
    seed: int = 0
    clip_norm: float = 10.0
    d2_subsample: int | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ContractError("learning_rate must be positive and weight_decay nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.embedded_calib_fraction < 1.0:
            raise ContractError("embedded_calib_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TwoStageModel:
    """Separate point and log-residual networks for the traditional baseline.

    With ``params_s`` set to ``None`` the scale is the constant 1, i.e. the
    plain absolute-residual score.
    """

    params_m: ModelParams
    params_s: ModelParams | None


@dataclass
class TrainReport:
    method: str
    seed: int
    config: dict
    picp_trace: list[float] = field(default_factory=list)
    mpiw_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    split_fingerprints: list[str] = field(default_factory=list)
    clip_events: int = 0
    wall_clock: float = 0.0
    params: object = None
    extra: dict = field(default_factory=dict)

    def to_json(self, include_timing: bool = False) -> str:
        """Structured record; wall-clock time is left out unless requested."""
        doc = {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "picp_trace": self.picp_trace,
            "mpiw_trace": self.mpiw_trace,
            "loss_trace": self.loss_trace,
            "clip_events": self.clip_events,
            "extra": self.extra,
        }
        if include_timing:
            doc["wall_clock"] = self.wall_clock
        return json.dumps(doc, sort_keys=True)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _init_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _fingerprint(idx: np.ndarray) -> str:
    return hashlib.sha1(np.sort(idx).astype(np.int64).tobytes()).hexdigest()[:16]


class _Stepper:
    """Backward, clip and update for one parameter set."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.opt = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)
        self.clip_events = 0

    def run(self, build, where: str) -> float:
        """Build the loss with ``build(tape)`` on a fresh tape and take one step."""
        tape = ad.Tape()
        try:
            loss = build(tape)
        except NumericError as exc:
            raise NumericError(f"{exc} at {where}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at {where}")
        grads = tape.backward(loss)
        grads, clipped = clip_grad_norm(grads, self.cfg.clip_norm)
        if clipped:
            self.clip_events += 1
            log.debug("gradient clipped at %s", where)
        self.opt.step(self.params.arrays, grads)
        return value


def _batches(order: np.ndarray, size: int, min_size: int = 1):
    for start in range(0, len(order), size):
        b = order[start : start + size]
        if len(b) >= min_size:
            yield b


def _log_epoch(method, epoch, cfg, loss, p, w):
    if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
        log.info("%s epoch=%d loss=%.6g picp=%.4f mpiw=%.4f", method, epoch + 1, loss, p, w)


# ---------------------------------------------------------------------------
# interval construction for trained models


def point_and_scale(model, X) -> tuple[np.ndarray, np.ndarray]:
    """``(m, sigma)`` for an ``m_s`` network or a :class:`TwoStageModel`."""
    if isinstance(model, TwoStageModel):
        m = predict(model.params_m, X)["m"]
        if model.params_s is None:
            return m, np.ones_like(m)
        s = predict(model.params_s, X)["m"]
        return m, np.exp(np.clip(s, -S_CLAMP, S_CLAMP))
    if model.config.head_mode != "m_s":
        raise ContractError("point_and_scale needs an m_s network or a two-stage model")
    out = predict(model, X)
    return out["m"], out["sigma"]


def icp_intervals(model, X_cal, y_cal, X_test, epsilon: float) -> tuple[PredictionInterval, float]:
    m_cal, s_cal = point_and_scale(model, X_cal)
    cq = conformal_quantile(ncm(y_cal, m_cal, s_cal), epsilon)
    m, s = point_and_scale(model, X_test)
    return predict_interval(m, s, cq.q), cq.q


def run_test_icp(model, X_cal, y_cal, X_test, y_test, epsilon: float) -> IntervalMetrics:
    """Calibrate on a held-out set and score intervals on a test set."""
    if len(y_cal) == 0 or len(y_test) == 0:
        raise ContractError("calibration and test sets must be nonempty")
    intervals, _ = icp_intervals(model, X_cal, y_cal, X_test, epsilon)
    return evaluate(intervals, y_test)


def direct_intervals(params: ModelParams, X) -> PredictionInterval:
    out = predict(params, X)
    return PredictionInterval(out["lower"], out["upper"])


# ---------------------------------------------------------------------------
# DOICR


def train_doicr(X, y, net_config: NetConfig, cfg: TrainConfig, loss_cfg: LossConfig):
    """Minimize the embedded-ICP width with a fresh D1/D2 split every epoch.

    Returns ``(params, report)``.  The per-epoch traces hold coverage and
    width of the embedded ICP on D1 at the end of the epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(y)
    eps = loss_cfg.epsilon
    n2 = int(round(cfg.embedded_calib_fraction * n))
    if cfg.d2_subsample is not None:
        n2_step = min(n2, cfg.d2_subsample)
    else:
        n2_step = n2
    if n2_step < 1 or n - n2 < 1 or quantile_rank(n2_step, eps) > n2_step:
        raise ConfigurationError(
            f"embedded calibration set of {n2_step} examples is too small for epsilon={eps}; "
            f"need at least {min_calibration_size(eps)}"
        )
    split_rng, init_rng, sub_rng = _streams(cfg.seed, 3)
    params = init_params(net_config, _init_seed(init_rng))
    step = _Stepper(params, cfg)
    report = TrainReport("doicr", cfg.seed, {**cfg.to_dict(), "epsilon": eps})
    start = time.perf_counter()
    perm = None
    for epoch in range(cfg.epochs):
        if perm is None or not cfg.fixed_embedded_split:
            perm = split_rng.permutation(n)
        d2, d1 = perm[:n2], perm[n2:]
        report.split_fingerprints.append(_fingerprint(d2))
        order = d1 if epoch == 0 or not cfg.fixed_embedded_split else split_rng.permutation(d1)
        losses = []
        for b, batch in enumerate(_batches(order, cfg.batch_size)):
            cal = d2
            if n2_step < n2:
                cal = sub_rng.choice(d2, size=n2_step, replace=False)

            def build(tape, batch=batch, cal=cal):
                return loss_doicr(params, X[batch], X[cal], y[cal], eps, tape, bind(tape, params))

            losses.append(step.run(build, f"epoch {epoch + 1} batch {b}"))
        p, w = _embedded_metrics(params, X[d1], y[d1], X[d2], y[d2], eps)
        report.picp_trace.append(p)
        report.mpiw_trace.append(w)
        report.loss_trace.append(float(np.mean(losses)))
        _log_epoch("doicr", epoch, cfg, report.loss_trace[-1], p, w)
    report.wall_clock = time.perf_counter() - start
    report.clip_events = step.clip_events
    report.params = params
    return params, report


def _embedded_metrics(params, X1, y1, X2, y2, eps) -> tuple[float, float]:
    intervals, _ = icp_intervals(params, X2, y2, X1, eps)
    return picp(intervals, y1), mpiw(intervals)


# ---------------------------------------------------------------------------
# baselines


def train_baseline(method: str, X, y, net_config: NetConfig, cfg: TrainConfig, loss_cfg: LossConfig):
    """Train QD-soft, SCPO, or the two-stage traditional model.

    Returns ``(model, report)``; ``model`` is a :class:`ModelParams` except
    for ``traditional``, which returns a :class:`TwoStageModel`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if method == "qd_soft":
        return _train_qd_soft(X, y, net_config, cfg, loss_cfg)
    if method == "scpo":
        return _train_scpo(X, y, net_config, cfg, loss_cfg)
    if method in ("traditional", "traditional_constant"):
        return _train_traditional(X, y, net_config, cfg, normalized=method == "traditional")
    raise ContractError(f"unknown baseline {method!r}; choose from {BASELINES}")


def _train_qd_soft(X, y, net_config, cfg, loss_cfg):
    net_config = replace(net_config, head_mode="lower_upper")
    order_rng, init_rng = _streams(cfg.seed, 2)
    params = init_params(net_config, _init_seed(init_rng))
    step = _Stepper(params, cfg)
    report = TrainReport("qd_soft", cfg.seed, {**cfg.to_dict(), **asdict(loss_cfg)})
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        losses = []
        for b, batch in enumerate(_batches(order_rng.permutation(len(y)), cfg.batch_size)):

            def build(tape, batch=batch):
                out = mlp_forward(params, X[batch], tape, bind(tape, params))
                return loss_qd_soft(out.lower, out.upper, y[batch], loss_cfg)

            losses.append(step.run(build, f"epoch {epoch + 1} batch {b}"))
        intervals = direct_intervals(params, X)
        report.picp_trace.append(picp(intervals, y))
        report.mpiw_trace.append(mpiw(intervals))
        report.loss_trace.append(float(np.mean(losses)))
        _log_epoch("qd_soft", epoch, cfg, report.loss_trace[-1], report.picp_trace[-1], report.mpiw_trace[-1])
    report.wall_clock = time.perf_counter() - start
    report.clip_events = step.clip_events
    report.params = params
    return params, report


def _train_scpo(X, y, net_config, cfg, loss_cfg):
    eps = loss_cfg.epsilon
    need = min_calibration_size(eps)
    if min(cfg.batch_size, len(y)) < need:
        raise ConfigurationError(
            f"SCPO batch of {cfg.batch_size} is too small for epsilon={eps}; need at least {need}"
        )
    order_rng, init_rng = _streams(cfg.seed, 2)
    params = init_params(net_config, _init_seed(init_rng))
    step = _Stepper(params, cfg)
    report = TrainReport("scpo", cfg.seed, {**cfg.to_dict(), **asdict(loss_cfg)})
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        losses = []
        # a trailing batch too small for a finite quantile is skipped
        for b, batch in enumerate(_batches(order_rng.permutation(len(y)), cfg.batch_size, need)):

            def build(tape, batch=batch):
                return loss_scpo(params, X[batch], y[batch], loss_cfg, tape, bind(tape, params))

            losses.append(step.run(build, f"epoch {epoch + 1} batch {b}"))
        intervals, _ = icp_intervals(params, X, y, X, eps)
        report.picp_trace.append(picp(intervals, y))
        report.mpiw_trace.append(mpiw(intervals))
        report.loss_trace.append(float(np.mean(losses)))
        _log_epoch("scpo", epoch, cfg, report.loss_trace[-1], report.picp_trace[-1], report.mpiw_trace[-1])
    report.wall_clock = time.perf_counter() - start
    report.clip_events = step.clip_events
    report.params = params
    return params, report


def _fit_regressor(params, X, targets, cfg, rng, where) -> tuple[list[float], int]:
    step = _Stepper(params, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        losses = []
        for b, batch in enumerate(_batches(rng.permutation(len(targets)), cfg.batch_size)):

            def build(tape, batch=batch):
                return loss_mse(mlp_forward(params, X[batch], tape, bind(tape, params)).first, targets[batch])

            losses.append(step.run(build, f"{where} epoch {epoch + 1} batch {b}"))
        trace.append(float(np.mean(losses)))
    return trace, step.clip_events


def _train_traditional(X, y, net_config, cfg, normalized: bool):
    method = "traditional" if normalized else "traditional_constant"
    single = replace(net_config, head_mode="single")
    order_m, order_s, init_m, init_s = _streams(cfg.seed, 4)
    params_m = init_params(single, _init_seed(init_m))
    report = TrainReport(method, cfg.seed, cfg.to_dict())
    start = time.perf_counter()
    stage1, clips = _fit_regressor(params_m, X, y, cfg, order_m, "stage 1")
    report.extra["stage1_loss_trace"] = stage1
    params_s = None
    if normalized:
        params_s = init_params(single, _init_seed(init_s))
        target = log_residual_target(y, predict(params_m, X)["m"])
        stage2, clips2 = _fit_regressor(params_s, X, target, cfg, order_s, "stage 2")
        clips += clips2
        report.loss_trace = stage2
    else:
        report.loss_trace = stage1
    model = TwoStageModel(params_m, params_s)
    # a single end-of-training point; per-epoch intervals are not defined in stage 1
    intervals, _ = icp_intervals(model, X, y, X, 0.1)
    report.extra["final_train_picp_eps0.1"] = picp(intervals, y)
    report.picp_trace = [None] * (cfg.epochs - 1) + [picp(intervals, y)]
    report.mpiw_trace = [None] * (cfg.epochs - 1) + [mpiw(intervals)]
    report.wall_clock = time.perf_counter() - start
    report.clip_events = clips
    report.params = model
    return model, report


def train(method: str, X, y, net_config: NetConfig, cfg: TrainConfig, loss_cfg: LossConfig):
    if method == "doicr":
        return train_doicr(X, y, net_config, cfg, loss_cfg)
    return train_baseline(method, X, y, net_config, cfg, loss_cfg)


# ---------------------------------------------------------------------------
# grid search


def expand_grid(grid: dict[str, list]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def point_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def validation_loss(method: str, model, X_val, y_val, loss_cfg: LossConfig, r: float, seed: int) -> float:
    """The method's own objective evaluated on held-out data."""
    if method == "doicr":
        perm = np.random.default_rng(seed).permutation(len(y_val))
        n2 = int(round(r * len(y_val)))
        d2, d1 = perm[:n2], perm[n2:]
        return loss_doicr(model, X_val[d1], X_val[d2], y_val[d2], loss_cfg.epsilon).item()
    if method == "scpo":
        return loss_scpo(model, X_val, y_val, loss_cfg).item()
    if method == "qd_soft":
        out = mlp_forward(model, X_val)
        return loss_qd_soft(out.lower, out.upper, y_val, loss_cfg).item()
    if method in ("traditional", "traditional_constant"):
        m = predict(model.params_m, X_val)["m"]
        return float(np.mean((m - y_val) ** 2))
    raise ContractError(f"unknown method {method!r}")


@dataclass
class GridResult:
    best: TrainConfig
    best_loss: float
    rows: list[dict]
    best_model: object = None


def _grid_point(args):
    method, index, point, base, net_config, loss_cfg, X, y, X_val, y_val = args
    cfg = replace(base, **point, seed=point_seed(base.seed, index))
    row = {"index": index, **point, "seed": cfg.seed}
    try:
        model, _ = train(method, X, y, net_config, cfg, loss_cfg)
        loss = validation_loss(method, model, X_val, y_val, loss_cfg, cfg.embedded_calib_fraction, cfg.seed)
        if not math.isfinite(loss):
            raise NumericError("non-finite validation loss")
        row.update(status="ok", validation_loss=loss)
        return row, cfg, model
    except (NumericError, ConfigurationError, FloatingPointError) as exc:
        row.update(status="failed", validation_loss=None, error=str(exc))
        return row, cfg, None


def grid_search(
    method: str,
    grid: dict[str, list],
    X,
    y,
    X_val,
    y_val,
    net_config: NetConfig,
    base: TrainConfig,
    loss_cfg: LossConfig,
    n_jobs: int = 1,
) -> GridResult:
    """Train one model per grid point and keep the lowest validation loss.

    Ties go to the smaller learning rate, then the smaller batch size.  Each
    point draws its seed from ``(base.seed, index)``, so results do not
    depend on ``n_jobs``.
    """
    if len(y_val) == 0:
        raise ContractError("grid search needs a validation set")
    points = expand_grid(grid)
    jobs = [
        (method, i, p, base, net_config, loss_cfg, X, y, X_val, y_val) for i, p in enumerate(points)
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_grid_point, jobs))
    else:
        results = [_grid_point(j) for j in jobs]
    ok = [r for r in results if r[0]["status"] == "ok"]
    if not ok:
        details = "; ".join(f"#{r[0]['index']}: {r[0]['error']}" for r in results)
        raise NumericError(f"every grid point failed: {details}")
    row, cfg, model = min(
        ok,
        key=lambda r: (r[0]["validation_loss"], r[1].learning_rate, r[1].batch_size, r[0]["index"]),
    )
    return GridResult(cfg, row["validation_loss"], [r[0] for r in results], model)
