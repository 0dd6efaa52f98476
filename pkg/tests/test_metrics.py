import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doicr import autodiff as ad
from doicr.conformal import PredictionInterval, predict_interval
from doicr.errors import ContractError
from doicr.metrics import evaluate, mpiw, mpiw_capt, picp, picp_soft, picp_soft_on_tape

# ten intervals; targets 3, 5 and 9 fall outside, targets 2 and 8 sit on a bound
LOWER = [0.0, 0.0, 1.0, -1.0, 2.0, 0.0, -2.0, 3.0, 0.0, 1.0]
UPPER = [2.0, 1.0, 3.0, 1.0, 4.0, 0.5, 0.0, 5.0, 1.0, 2.0]
Y = [1.0, 1.0, 0.0, 0.0, 5.0, 0.25, -1.0, 3.0, 2.0, 1.5]
TOY = PredictionInterval(np.array(LOWER), np.array(UPPER))


def _scalar_sigmoid(x):
    x = max(-500.0, min(500.0, x))
    return 1.0 / (1.0 + math.exp(-x))


def _scalar_metrics(lower, upper, y, gamma):
    n = len(y)
    hits = [1 if lo <= t <= hi else 0 for lo, hi, t in zip(lower, upper, y)]
    widths = [hi - lo for lo, hi in zip(lower, upper)]
    soft = sum(_scalar_sigmoid(gamma * (t - lo)) * _scalar_sigmoid(gamma * (hi - t)) for lo, hi, t in zip(lower, upper, y))
    c = sum(hits)
    capt = sum(w * k for w, k in zip(widths, hits)) / max(c, 1)
    return sum(hits) / n, sum(widths) / n, soft / n, capt


def test_toy_hand_counts():
    assert picp(TOY, Y) == 0.7
    assert mpiw(TOY) == 1.55
    assert mpiw_capt(TOY, Y) == 1.5


@pytest.mark.parametrize("gamma", [1.0, 160.0, 1e3])
def test_toy_matches_scalar_recomputation(gamma):
    p, w, s, c = _scalar_metrics(LOWER, UPPER, Y, gamma)
    assert abs(picp(TOY, Y) - p) <= 1e-12
    assert abs(mpiw(TOY) - w) <= 1e-12
    assert abs(picp_soft(TOY, Y, gamma) - s) <= 1e-12
    assert abs(mpiw_capt(TOY, Y) - c) <= 1e-12


def test_soft_on_tape_matches_numpy():
    t = ad.Tape()
    v = picp_soft_on_tape(t.param(np.array(LOWER)), t.param(np.array(UPPER)), np.array(Y), 160.0)
    assert abs(v.item() - picp_soft(TOY, Y, 160.0)) <= 1e-12


def test_soft_tends_to_hard_coverage():
    # none of these targets touches a bound
    lower = np.array([0.0, 0.0, -1.0, 2.0, -3.0])
    upper = np.array([1.0, 2.0, 1.0, 4.0, -2.0])
    y = np.array([0.5, 3.0, 0.999, 1.5, -2.5])
    iv = PredictionInterval(lower, upper)
    assert abs(picp_soft(iv, y, 1e6) - picp(iv, y)) <= 1e-6


def test_soft_inside_goes_to_one():
    iv = PredictionInterval(np.array([-1.0, 0.0]), np.array([1.0, 3.0]))
    assert abs(picp_soft(iv, np.array([0.0, 1.5]), 1e6) - 1.0) <= 1e-6


def test_soft_on_bound_is_one_half():
    iv = PredictionInterval(np.array([0.0]), np.array([100.0]))
    assert abs(picp_soft(iv, np.array([0.0]), 160.0) - 0.5) <= 1e-12


def test_examples_from_contracts():
    iv = PredictionInterval(np.array([0.0, -1.0]), np.array([2.0, 1.0]))
    assert picp(iv, [1.0, 0.0]) == 1.0
    assert picp(iv, [2.0, -1.0]) == 1.0
    assert mpiw(PredictionInterval(np.zeros(3), np.zeros(3))) == 0.0
    assert mpiw(PredictionInterval(np.array([0.0, 0.0]), np.array([1.0, 3.0]))) == 2.0
    assert mpiw(predict_interval([0.0, 0.0], [0.5, 1.5], 1.0)) == 2.0


def test_mpiw_capt_cases():
    iv = PredictionInterval(np.array([0.0, 0.0]), np.array([2.0, 4.0]))
    assert mpiw_capt(iv, [1.0, 2.0]) == mpiw(iv)
    assert mpiw_capt(iv, [-1.0, 5.0]) == 0.0
    assert mpiw_capt(iv, [1.0, 5.0]) == 2.0


def test_empty_and_mismatched_inputs():
    with pytest.raises(ContractError):
        picp(PredictionInterval(np.array([]), np.array([])), [])
    with pytest.raises(ContractError):
        mpiw(PredictionInterval(np.array([]), np.array([])))
    with pytest.raises(ContractError):
        picp(TOY, Y[:3])
    with pytest.raises(ContractError):
        picp_soft(TOY, Y, 0.0)


def test_crossed_bounds_tolerated_and_counted():
    iv = PredictionInterval(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    m = evaluate(iv, [0.5, 0.5])
    assert m.crossed == 1
    assert m.mpiw == 0.0
    assert m.picp == 0.5


def test_evaluate_record():
    m = evaluate(TOY, Y)
    assert (m.picp, m.mpiw, m.captured_count, m.mpiw_capt, m.n) == (0.7, 1.55, 7, 1.5, 10)
    assert m.captured_count == round(m.picp * m.n)
    assert not m.unbounded


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, st.floats(0, 10), finite), min_size=1, max_size=30), finite, st.floats(0.1, 10))
def test_shift_and_scale_invariance(rows, shift, factor):
    # dyadic grid values make every shifted comparison exact
    lower = np.round(np.array([r[0] for r in rows]) * 8) / 8
    upper = lower + np.round(np.array([r[1] for r in rows]) * 8) / 8
    y = np.round(np.array([r[2] for r in rows]) * 8) / 8
    iv = PredictionInterval(lower, upper)
    shift = round(shift * 8) / 8
    moved = PredictionInterval(lower + shift, upper + shift)
    assert picp(moved, y + shift) == picp(iv, y)
    assert abs(mpiw(moved) - mpiw(iv)) <= 1e-9 * (1 + abs(shift))
    scaled = PredictionInterval(lower * factor, upper * factor)
    assert math.isclose(mpiw(scaled), factor * mpiw(iv), rel_tol=1e-12, abs_tol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, st.floats(0, 10)), min_size=1, max_size=30))
def test_capt_equals_mpiw_at_full_coverage(rows):
    lower = np.array([r[0] for r in rows])
    upper = lower + np.array([r[1] for r in rows])
    iv = PredictionInterval(lower, upper)
    y = lower
    assert picp(iv, y) == 1.0
    assert math.isclose(mpiw_capt(iv, y), mpiw(iv), rel_tol=1e-12, abs_tol=1e-12)
