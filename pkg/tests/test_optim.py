import math

import numpy as np
import pytest

from maxent_transfer.errors import DimensionError, StateError
from maxent_transfer.initializers import InitSpec
from maxent_transfer.network import build_mlp, replace_head
from maxent_transfer.optim import (
    JOINT,
    WARMUP,
    OptimizerState,
    adam_step,
    init_optimizer,
    sgd_step,
    step,
    warmup_mask,
)


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_sgd_zero_gradient():
    p = [np.array([1.0, -2.0])]
    sgd_step(p, [np.zeros(2)], 0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_sgd_example():
    p = [np.array([1.0])]
    sgd_step(p, [np.array([0.5])], 0.1)
    assert p[0][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_mask():
    p = [np.array([1.0]), np.array([2.0])]
    sgd_step(p, [np.array([3.0]), np.array([3.0])], 0.1, mask=[False, True])
    assert p[0][0] == 1.0 and p[1][0] == pytest.approx(1.7)


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1)


def test_adam_first_step_moves_by_lr():
    for g in (1e-6, -3.0, 250.0):
        p = [np.array([0.0])]
        state = init_optimizer(p, "adam", lr=1e-3)
        adam_step(state, p, [np.array([g])])
        assert abs(p[0][0]) == pytest.approx(1e-3, rel=1e-2)
        assert np.sign(p[0][0]) == -np.sign(g)


def test_adam_matches_scalar_oracle_constant_gradient():
    p = [np.array([0.7])]
    state = init_optimizer(p, "adam", lr=1e-2)
    for _ in range(100):
        adam_step(state, p, [np.array([0.3])])
    assert abs(p[0][0] - scalar_adam(0.7, [0.3] * 100, 1e-2)) <= 1e-12
    assert state.t == 100


def test_adam_matches_scalar_oracle_varying_gradient():
    g = np.random.default_rng(0).normal(size=1000)
    p = [np.array([0.0])]
    state = init_optimizer(p, "adam", lr=1e-3)
    for gi in g:
        adam_step(state, p, [np.array([gi])])
    assert abs(p[0][0] - scalar_adam(0.0, g.tolist(), 1e-3)) <= 1e-12


def test_adam_zero_gradient_first_step():
    p = [np.array([1.25, -4.0])]
    state = init_optimizer(p, "adam")
    adam_step(state, p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.25, -4.0])


def test_adam_uninitialized_state():
    with pytest.raises(StateError):
        adam_step(OptimizerState(), [np.zeros(1)], [np.zeros(1)])


def test_adam_masked_params_untouched_and_moments_frozen():
    p = [np.array([1.0]), np.array([1.0])]
    state = init_optimizer(p, "adam", lr=0.1)
    adam_step(state, p, [np.array([1.0]), np.array([1.0])], mask=[False, True])
    assert p[0][0] == 1.0 and p[1][0] != 1.0
    assert state.m[0][0] == 0.0 and state.counts == [0, 1]
    # an unmasked parameter later gets its own bias correction from count 1
    adam_step(state, p, [np.array([2.0]), np.array([2.0])])
    assert p[0][0] == pytest.approx(scalar_adam(1.0, [2.0], 0.1), abs=1e-15)


@pytest.mark.parametrize("kind", ["adam", "sgd"])
def test_zero_lr_is_identity(kind, rng):
    p = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    before = [x.tobytes() for x in p]
    state = init_optimizer(p, kind, lr=0.0)
    for _ in range(3):
        step(state, p, [rng.normal(size=(3, 2)), rng.normal(size=4)])
    assert [x.tobytes() for x in p] == before
    assert state.t == 3


def test_warmup_mask(rng):
    net = replace_head(build_mlp((4,), 3, rng, hidden=(5,)), 2, InitSpec.mei(2), rng, use_fn=True)
    mask = warmup_mask(net, WARMUP)
    assert mask == [False, False, True, True]
    assert warmup_mask(net, JOINT) == [True] * 4
    with pytest.raises(ValueError):
        warmup_mask(net, "other")


def test_warmup_step_keeps_pretrained_bits(rng):
    net = replace_head(build_mlp((4,), 3, rng, hidden=(5,)), 2, InitSpec("he_fan_out"), rng)
    params = net.parameters()
    before = [p.tobytes() for p in params]
    state = init_optimizer(params, "adam", lr=0.1)
    step(state, params, [np.ones_like(p) for p in params], warmup_mask(net, WARMUP))
    assert [p.tobytes() for p in params[:2]] == before[:2]
    assert all(p.tobytes() != b for p, b in zip(params[2:], before[2:]))


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        init_optimizer([], "rmsprop")
