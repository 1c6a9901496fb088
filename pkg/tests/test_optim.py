"""AdaMax update semantics."""

import numpy as np
import pytest

import ctxsyn.tensor as T
from ctxsyn.optim import (AdaMax, AdaMaxState, NonFiniteGradient, adamax_step,
                          EPS)


def test_zero_gradient_leaves_params(rng):
    p = rng.standard_normal(5)
    before = p.copy()
    adamax_step([p], [np.zeros(5)], AdaMaxState())
    assert np.array_equal(p, before)


def test_single_step_matches_transcribed_rule():
    # independent transcription of: m=b1*m+(1-b1)*g; u=max(b2*u,|g|);
    # theta -= lr/(1-b1^t) * m/(u+eps)
    theta, g = 1.0, 1.0
    m = 0.9 * 0.0 + 0.1 * g
    u = max(0.999 * 0.0, abs(g))
    expected = theta - (0.001 / (1 - 0.9 ** 1)) * m / (u + EPS)

    p = np.array([1.0])
    state = AdaMaxState()
    adamax_step([p], [np.array([1.0])], state)
    assert p[0] == pytest.approx(expected, abs=1e-16)
    assert state.step == 1


def test_repeated_identical_gradients_keep_u_constant(rng):
    p = rng.standard_normal(4)
    g = rng.standard_normal(4)
    state = AdaMaxState()
    adamax_step([p], [g], state)
    u1 = state.u[0].copy()
    for _ in range(5):
        adamax_step([p], [g], state)
    assert np.array_equal(state.u[0], u1)


def test_u_nonnegative(rng):
    p = rng.standard_normal(8)
    state = AdaMaxState()
    for _ in range(10):
        adamax_step([p], [rng.standard_normal(8)], state)
        assert np.all(state.u[0] >= 0)


def test_non_finite_gradient_rejected_state_unchanged(rng):
    p = rng.standard_normal(3)
    state = AdaMaxState()
    adamax_step([p], [np.ones(3)], state)
    snapshot = (p.copy(), state.step, state.m[0].copy(), state.u[0].copy())
    bad = np.array([1.0, np.nan, 0.0])
    with pytest.raises(NonFiniteGradient):
        adamax_step([p], [bad], state)
    assert np.array_equal(p, snapshot[0])
    assert state.step == snapshot[1]
    assert np.array_equal(state.m[0], snapshot[2])
    assert np.array_equal(state.u[0], snapshot[3])


def test_shape_mismatch_rejected(rng):
    with pytest.raises(T.ShapeError):
        adamax_step([np.zeros(3)], [np.zeros(4)], AdaMaxState())


def test_optimizer_wrapper_steps_tensor_params(rng):
    p = T.Tensor(rng.standard_normal(4), requires_grad=True)
    opt = AdaMax([p], lr=0.5)
    T.backward(T.tensor_sum(p * 2.0))
    before = p.data.copy()
    opt.step()
    assert not np.array_equal(p.data, before)
    opt.zero_grad()
    assert np.array_equal(p.grad, np.zeros(4))
