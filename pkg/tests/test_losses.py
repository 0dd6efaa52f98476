import math

import numpy as np
import pytest

from doicr import autodiff as ad
from doicr.conformal import PredictionInterval, conformal_quantile, ncm
from doicr.errors import ConfigurationError, ContractError, NonSmoothPointError
from doicr.losses import (
    LossConfig,
    log_residual_target,
    loss_doicr,
    loss_qd_soft,
    loss_scpo,
    loss_traditional,
)
from doicr.metrics import mpiw_capt, picp_soft
from doicr.network import NetConfig, bind, bind_flat, init_params, mlp_forward, predict, zero_params


def _sig(x):
    x = max(-500.0, min(500.0, x))
    return 1.0 / (1.0 + math.exp(-x))


def test_defaults():
    cfg = LossConfig()
    assert cfg.lam == 0.01 and cfg.gamma == 160.0
    with pytest.raises(ContractError):
        LossConfig(epsilon=1.0)


# -- DOICR --------------------------------------------------------------------


def test_doicr_zero_net_example():
    p = zero_params(NetConfig(3))
    rng = np.random.default_rng(0)
    y2 = np.arange(1.0, 11.0)
    for n1 in (1, 4, 17):
        loss = loss_doicr(p, rng.normal(size=(n1, 3)), rng.normal(size=(10, 3)), y2, 0.2)
        assert loss.item() == 18.0


def test_doicr_value_six():
    p = zero_params(NetConfig(2))
    p.arrays["b2"][0, 1] = math.log(2.0)
    y2 = np.array([1.0, 1, 1, 1, 1, 1, 1, 1, 3, 5])
    loss = loss_doicr(p, np.zeros((1, 2)), np.zeros((10, 2)), y2, 0.2)
    assert abs(loss.item() - 6.0) <= 1e-12


def test_doicr_infinite_q_is_configuration_error():
    p = zero_params(NetConfig(2))
    with pytest.raises(ConfigurationError, match="too small"):
        loss_doicr(p, np.zeros((3, 2)), np.zeros((4, 2)), np.ones(4), 0.1)


def test_doicr_cross_module_consistency():
    rng = np.random.default_rng(31)
    for seed in range(20):
        p = init_params(NetConfig(3, (6, 6)), seed=seed)
        p = p.unflatten(p.flatten() + rng.normal(scale=0.3, size=p.count()))
        X1, X2 = rng.normal(size=(13, 3)), rng.normal(size=(40, 3))
        y2 = rng.normal(size=40)
        got = loss_doicr(p, X1, X2, y2, 0.1).item()
        out2, out1 = predict(p, X2), predict(p, X1)
        q = conformal_quantile(ncm(y2, out2["m"], out2["sigma"]), 0.1).q
        expected = 2 * q * out1["sigma"].sum() / len(X1)
        assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))


def _random_point(rng, config):
    p = init_params(config, seed=int(rng.integers(1 << 30)))
    # nonzero biases keep hidden units away from exact-zero pre-activations
    return p, p.flatten() + rng.normal(scale=0.3, size=p.count())


def _scored(fn_factory, rng, config, points=5, tol=1e-4):
    scored = 0
    while scored < points:
        p, flat = _random_point(rng, config)
        try:
            err = ad.check_gradient(fn_factory(p), flat, 1e-5)
        except NonSmoothPointError:
            continue
        assert err < tol
        scored += 1


def test_doicr_gradient_small_instance():
    rng = np.random.default_rng(8)
    X1, X2 = rng.normal(size=(5, 2)), rng.normal(size=(7, 2))
    y2 = rng.normal(size=7)

    def factory(p):
        return lambda tape, v: loss_doicr(p, X1, X2, y2, 0.2, tape, bind_flat(v, p))

    _scored(factory, rng, NetConfig(2, (4, 4)))


def test_doicr_decreases_under_gradient_descent():
    rng = np.random.default_rng(3)
    X1, X2 = rng.normal(size=(20, 2)), rng.normal(size=(30, 2))
    y2 = np.sin(X2[:, 0]) + 0.3 * rng.normal(size=30)
    p = init_params(NetConfig(2, (8, 8)), seed=1)
    losses = []
    for _ in range(50):
        tape = ad.Tape()
        loss = loss_doicr(p, X1, X2, y2, 0.1, tape, bind(tape, p))
        grads = tape.backward(loss)
        for k in p.names():
            p.arrays[k] -= 1e-5 * grads[k]
        losses.append(loss.item())
    assert losses[-1] < losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:]))


# -- QD-soft ------------------------------------------------------------------


def _qd(lower, upper, y, cfg):
    t = ad.Tape()
    return loss_qd_soft(t.param(np.array(lower, float)), t.param(np.array(upper, float)), y, cfg)


def _qd_scalar(lower, upper, y, cfg):
    n = len(y)
    hits = [lo <= t <= hi for lo, hi, t in zip(lower, upper, y)]
    c = max(sum(hits), 1)
    capt = sum(hi - lo for lo, hi, h in zip(lower, upper, hits) if h) / c
    soft = sum(_sig(cfg.gamma * (t - lo)) * _sig(cfg.gamma * (hi - t)) for lo, hi, t in zip(lower, upper, y)) / n
    short = max(0.0, (1 - cfg.epsilon) - soft)
    return capt + cfg.lam * n / (cfg.epsilon * (1 - cfg.epsilon)) * short**2


def test_qd_soft_worked_example():
    cfg = LossConfig(epsilon=0.2, lam=0.01, gamma=160.0, method="qd_soft")
    # first target sits on its lower bound (soft 0.5); the second contributes 0.7
    a = math.log(0.7 / 0.3) / 160.0
    lower, upper, y = [0.0, 0.0], [1.0, 3.0], [0.0, a]
    assert abs(picp_soft(PredictionInterval(np.array(lower), np.array(upper)), y, 160.0) - 0.6) <= 1e-12
    expected = 2 + 0.01 * (2 / 0.16) * 0.2**2
    assert abs(expected - 2.005) <= 1e-15
    assert abs(_qd(lower, upper, y, cfg).item() - 2.005) <= 1e-12


def test_qd_soft_inactive_hinge():
    cfg = LossConfig(epsilon=0.1, method="qd_soft")
    lower, upper, y = [0.0, -1.0, 2.0], [1.0, 1.0, 5.0], [0.5, 0.0, 3.5]
    iv = PredictionInterval(np.array(lower), np.array(upper))
    assert picp_soft(iv, y, cfg.gamma) >= 0.9
    assert _qd(lower, upper, y, cfg).item() == mpiw_capt(iv, y)


def test_qd_soft_nothing_captured():
    cfg = LossConfig(epsilon=0.1, method="qd_soft")
    lower, upper, y = [0.0, 0.0], [1.0, 1.0], [3.0, -2.0]
    n = 2
    penalty = cfg.lam * n / (0.1 * 0.9) * 0.9**2
    assert abs(_qd(lower, upper, y, cfg).item() - penalty) <= 1e-12


def test_qd_soft_matches_scalar_recomputation():
    rng = np.random.default_rng(12)
    cfg = LossConfig(epsilon=0.1, gamma=20.0, method="qd_soft")
    for _ in range(20):
        lower = rng.normal(size=8)
        upper = lower + rng.uniform(-0.2, 2, size=8)
        y = rng.normal(size=8)
        assert abs(_qd(lower, upper, y, cfg).item() - _qd_scalar(lower, upper, y, cfg)) <= 1e-12


def test_qd_soft_indicator_is_detached():
    cfg = LossConfig(epsilon=0.5, gamma=1.0, lam=0.0, method="qd_soft")
    t = ad.Tape()
    lo, hi = t.param(np.array([0.0, 0.0]), "lo"), t.param(np.array([1.0, 3.0]), "hi")
    g = t.backward(loss_qd_soft(lo, hi, [0.5, 5.0], cfg))
    # only the captured example's width enters, each with weight 1 / c
    assert g["hi"].ravel().tolist() == [1.0, 0.0]
    assert g["lo"].ravel().tolist() == [-1.0, 0.0]


def test_qd_soft_gradient():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(12, 2))
    y = rng.normal(size=12)
    cfg = LossConfig(epsilon=0.1, gamma=5.0, method="qd_soft")

    def factory(p):
        def fn(tape, v):
            out = mlp_forward(p, X, tape, bind_flat(v, p))
            return loss_qd_soft(out.lower, out.upper, y, cfg)

        return fn

    _scored(factory, rng, NetConfig(2, (4, 4), head_mode="lower_upper"))


# -- SCPO ---------------------------------------------------------------------


def _scpo_scalar(p, X, y, cfg):
    out = predict(p, X)
    m, sigma = out["m"], out["sigma"]
    q = conformal_quantile(np.abs(y - m) / sigma, cfg.epsilon).q
    soft = np.mean([_sig(cfg.gamma * (t - (mi - q * s))) * _sig(cfg.gamma * ((mi + q * s) - t)) for mi, s, t in zip(m, sigma, y)])
    width = 2 * q * float(np.mean(sigma))
    if cfg.scpo_literal:
        return soft + cfg.lam * width, soft, width
    return ((1 - cfg.epsilon) - soft) ** 2 + cfg.lam * width, soft, width


def test_scpo_matches_scalar_recomputation():
    rng = np.random.default_rng(5)
    for literal in (False, True):
        cfg = LossConfig(epsilon=0.1, gamma=30.0, method="scpo", scpo_literal=literal)
        for seed in range(5):
            p = init_params(NetConfig(2, (5,)), seed=seed)
            X, y = rng.normal(size=(25, 2)), rng.normal(size=25)
            expected, _, _ = _scpo_scalar(p, X, y, cfg)
            assert abs(loss_scpo(p, X, y, cfg).item() - expected) <= 1e-12


def test_scpo_lambda_zero_is_pure_deviation():
    rng = np.random.default_rng(6)
    cfg = LossConfig(epsilon=0.1, lam=0.0, method="scpo")
    p = init_params(NetConfig(2, (5,)), seed=1)
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    _, soft, _ = _scpo_scalar(p, X, y, cfg)
    assert abs(loss_scpo(p, X, y, cfg).item() - (0.9 - soft) ** 2) <= 1e-12


def test_scpo_on_target_coverage_leaves_width_term():
    # zero net: alphas are |y| = 0, 0, 1, 1 and the rank ceil(0.75 * 5) = 4
    # gives q = 1; soft coverage is (1 + 1 + 0.5 + 0.5) / 4 = 0.75 = 1 - eps
    cfg = LossConfig(epsilon=0.25, lam=0.3, gamma=160.0, method="scpo")
    p = zero_params(NetConfig(1))
    y = np.array([0.0, 0.0, 1.0, -1.0])
    assert abs(loss_scpo(p, np.zeros((4, 1)), y, cfg).item() - 0.3 * 2.0) <= 1e-12


def test_scpo_gradient():
    rng = np.random.default_rng(22)
    X = rng.normal(size=(20, 2))
    y = rng.normal(size=20)
    cfg = LossConfig(epsilon=0.1, gamma=5.0, method="scpo")

    def factory(p):
        return lambda tape, v: loss_scpo(p, X, y, cfg, tape, bind_flat(v, p))

    _scored(factory, rng, NetConfig(2, (4, 4)))


def test_scpo_infinite_q():
    with pytest.raises(ConfigurationError):
        loss_scpo(zero_params(NetConfig(1)), np.zeros((5, 1)), np.ones(5), LossConfig(epsilon=0.1))


# -- traditional ----------------------------------------------------------------


def _single(p_from):
    return zero_params(NetConfig(p_from, head_mode="single"))


def test_traditional_perfect_point_model():
    pm, ps = _single(1), _single(1)
    pm.arrays["b2"][0, 0] = 2.5
    X = np.zeros((4, 1))
    y = np.full(4, 2.5)
    stage1, stage2 = loss_traditional(pm, ps, X, y)
    assert stage1.item() == 0.0
    assert np.all(log_residual_target(y, np.full(4, 2.5)) == math.log(1e-6))
    assert abs(stage2.item() - math.log(1e-6) ** 2) <= 1e-12


def test_traditional_constant_predictor_gives_variance():
    y = np.array([1.0, 4.0, -2.0, 7.0, 0.5])
    pm, ps = _single(1), _single(1)
    pm.arrays["b2"][0, 0] = y.mean()
    stage1, _ = loss_traditional(pm, ps, np.zeros((5, 1)), y)
    assert abs(stage1.item() - y.var()) <= 1e-12


def test_traditional_five_point_toy():
    X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    y = np.array([1.0, 2.0, 2.0, 5.0, 3.0])
    pm, ps = _single(1), _single(1)
    pm.arrays["b2"][0, 0] = 2.0
    ps.arrays["b2"][0, 0] = -1.0
    stage1, stage2 = loss_traditional(pm, ps, X, y)
    # residuals 1, 0, 0, 3, 1
    assert abs(stage1.item() - (1 + 0 + 0 + 9 + 1) / 5) <= 1e-12
    targets = [math.log(1 + 1e-6), math.log(1e-6), math.log(1e-6), math.log(3 + 1e-6), math.log(1 + 1e-6)]
    assert abs(stage2.item() - sum((-1.0 - t) ** 2 for t in targets) / 5) <= 1e-12


# -- finiteness -----------------------------------------------------------------


def test_losses_finite_for_extreme_inputs():
    rng = np.random.default_rng(0)
    p = init_params(NetConfig(2, (5,)), seed=0)
    p = p.unflatten(p.flatten() * 50)
    X = rng.normal(scale=30, size=(40, 2))
    y = rng.normal(scale=1e3, size=40)
    assert math.isfinite(loss_doicr(p, X[:20], X[20:], y[20:], 0.1).item())
    assert math.isfinite(loss_scpo(p, X, y, LossConfig(method="scpo")).item())
    pl = init_params(NetConfig(2, (5,), head_mode="lower_upper"), seed=0)
    out = mlp_forward(pl, X)
    assert math.isfinite(loss_qd_soft(out.lower, out.upper, y, LossConfig(method="qd_soft")).item())
