import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import max_rel_error, numeric_grad
from refine_rl.nn import (
    IDENTITY, TANH, AdamState, Mlp, ShapeError, actor_forward, adam_step, backward,
    critic_forward, flatten, forward, init_mlp, polyak_update, unflatten,
)
from refine_rl.rng import Rng


def const_net(dims, value, output=IDENTITY, bound=1.0):
    ws = [np.full((i, o), value, dtype=float) for i, o in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(o) for o in dims[1:]]
    return Mlp(ws, bs, output, bound)


def scalar_forward(net: Mlp, x: list[float]) -> list[float]:
    """Loop-by-loop forward pass, no matrix ops."""
    h = list(x)
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for j in range(w.shape[1]):
            z = b[j]
            for i in range(w.shape[0]):
                z += h[i] * w[i, j]
            out.append(max(z, 0.0) if layer < 2 else z)
        h = out
    if net.output == TANH:
        return [net.bound * math.tanh(z) for z in h]
    return h


def test_zero_actor_outputs_zero():
    net = const_net((3, 4, 4, 2), 0.0, TANH, 2.0)
    a, _ = actor_forward(net, Rng(0).normal(15).reshape(5, 3))
    assert np.all(a == 0.0)


def test_unit_chain_at_zero():
    net = const_net((1, 1, 1, 1), 1.0, TANH, 1.0)
    a, _ = actor_forward(net, np.zeros((1, 1)))
    assert a[0, 0] == 0.0


def test_actor_matches_scalar_oracle():
    net = init_mlp((1, 2, 2, 1), Rng(3), TANH, 1.0)
    a, _ = actor_forward(net, np.array([[0.5]]))
    assert a[0, 0] == pytest.approx(scalar_forward(net, [0.5])[0], rel=1e-14)


def test_critic_zero_and_identity_blocks():
    zero = const_net((2, 2, 2, 1), 0.0)
    q, _ = critic_forward(zero, np.array([[0.3]]), np.array([[-0.7]]))
    assert q.tolist() == [0.0]
    eye = Mlp([np.eye(2), np.eye(2), np.ones((2, 1))], [np.zeros(2), np.zeros(2), np.zeros(1)])
    q, _ = critic_forward(eye, np.array([[1.0]]), np.array([[0.0]]))
    assert q[0] == scalar_forward(eye, [1.0, 0.0])[0] == 1.0


def test_critic_batch_is_map():
    net = init_mlp((3, 5, 5, 1), Rng(1))
    s = Rng(2).normal(6).reshape(3, 2)
    a = Rng(3).normal(3).reshape(3, 1)
    q, _ = critic_forward(net, s, a)
    assert q.shape == (3,)
    for i in range(3):
        qi, _ = critic_forward(net, s[i:i + 1], a[i:i + 1])
        assert qi[0] == pytest.approx(q[i], rel=1e-15)
        assert qi[0] == pytest.approx(scalar_forward(net, list(s[i]) + list(a[i]))[0], rel=1e-12)


def test_dimension_mismatch_raises():
    net = init_mlp((3, 4, 4, 1), Rng(0), TANH)
    with pytest.raises(ShapeError):
        actor_forward(net, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        critic_forward(init_mlp((3, 4, 4, 1), Rng(0)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        actor_forward(init_mlp((3, 4, 4, 1), Rng(0)), np.zeros((1, 3)))


def test_backward_needs_cache():
    net = init_mlp((2, 3, 3, 1), Rng(0))
    with pytest.raises(ValueError):
        backward(net, None, np.ones(1))


def test_sum_loss_on_zero_network():
    net = const_net((3, 4, 4, 2), 0.0)
    _, cache = forward(net, np.array([[1.0, -2.0, 0.5]]))
    grads, _ = backward(net, cache, np.ones((1, 2)))
    assert np.all(grads.biases[2] == 1.0)
    # hidden activations are zero, so the last weight gradient is too
    assert np.all(grads.weights[2] == 0.0)


@pytest.mark.parametrize("output", [TANH, IDENTITY])
def test_backward_matches_finite_differences(output):
    net = init_mlp((3, 5, 4, 2), Rng(17), output, 1.5)
    x = Rng(18).normal(12).reshape(4, 3)
    c = Rng(19).normal(8).reshape(4, 2)

    def loss(n):
        y, _ = forward(n, x)
        return float(np.sum(c * y))

    y, cache = forward(net, x)
    grads, dx = backward(net, cache, c)
    num = numeric_grad(loss, net, 1e-6)
    assert max_rel_error(flatten(grads), num) <= 1e-6

    # input gradient, also by central differences
    num_dx = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        num_dx[idx] = (np.sum(c * forward(net, up)[0]) - np.sum(c * forward(net, down)[0])) / 2e-6
    assert max_rel_error(dx, num_dx) <= 1e-6


def test_input_gradient_in_linear_region():
    rng = Rng(4)
    ws = [rng.uniform(0.1, 1.0, 6).reshape(2, 3), rng.uniform(0.1, 1.0, 9).reshape(3, 3),
          rng.uniform(0.1, 1.0, 3).reshape(3, 1)]
    net = Mlp(ws, [np.zeros(3), np.zeros(3), np.zeros(1)])
    _, cache = forward(net, np.array([[0.5, 1.5]]))
    _, dx = backward(net, cache, np.ones((1, 1)))
    np.testing.assert_allclose(dx[0], (ws[0] @ ws[1] @ ws[2])[:, 0], rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3)),
       st.floats(0.1, 10.0))
def test_actor_output_within_bound(seed, x, bound):
    net = init_mlp((3, 8, 8, 2), Rng(seed), TANH, bound)
    a, _ = actor_forward(net, x)
    assert np.all(np.abs(a) <= bound)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_batch_forward_equals_per_sample(seed):
    net = init_mlp((4, 6, 6, 2), Rng(seed), TANH, 1.0)
    x = Rng(seed + 1).normal(20).reshape(5, 4)
    a, _ = actor_forward(net, x)
    for i in range(5):
        np.testing.assert_allclose(actor_forward(net, x[i:i + 1])[0][0], a[i], rtol=1e-13)


def scalar_net(value: float) -> Mlp:
    """A 1-1-1-1 network whose only free scalar we treat as W0."""
    return Mlp([np.array([[value]]), np.zeros((1, 1)), np.zeros((1, 1))],
               [np.zeros(1), np.zeros(1), np.zeros(1)])


def grads_for(g: float) -> Mlp:
    return Mlp([np.array([[g]]), np.zeros((1, 1)), np.zeros((1, 1))],
               [np.zeros(1), np.zeros(1), np.zeros(1)])


def test_adam_first_step_value():
    net, st_ = scalar_net(0.0), AdamState.for_params(scalar_net(0.0), lr=0.1)
    new, st2 = adam_step(net, st_, grads_for(1.0))
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert new.weights[0][0, 0] == -0.1 / (1.0 + 1e-8)
    assert new.weights[0][0, 0] == pytest.approx(-0.0999999990, abs=1e-12)
    assert st2.step_count == 1


def test_adam_zero_gradient_is_noop():
    net = init_mlp((2, 3, 3, 1), Rng(0))
    st_ = AdamState.for_params(net)
    new, st2 = adam_step(net, st_, net.zeros_like())
    assert all(np.array_equal(a, b) for a, b in zip(net.blocks(), new.blocks()))
    assert st2.step_count == 1


def adam_reference(x0: float, steps: int, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(x)
    return out


def test_adam_matches_scalar_reference():
    ref = adam_reference(1.0, 10, lr=0.1)
    net, st_ = scalar_net(1.0), AdamState.for_params(scalar_net(1.0), lr=0.1)
    for t in range(10):
        x = net.weights[0][0, 0]
        net, st_ = adam_step(net, st_, grads_for(2.0 * x))
        assert abs(net.weights[0][0, 0] - ref[t]) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_ascent_equals_descent_on_negated_loss(seed):
    net = init_mlp((2, 4, 4, 1), Rng(seed))
    g = init_mlp((2, 4, 4, 1), Rng(seed + 1))
    neg = unflatten(-flatten(g), g)
    st_ = AdamState.for_params(net)
    a_net, a_st = adam_step(net, st_, g, "ascent")
    d_net, d_st = adam_step(net, st_, neg, "descent")
    assert flatten(a_net).tobytes() == flatten(d_net).tobytes()
    assert flatten(a_st.m).tobytes() == flatten(d_st.m).tobytes()
    assert flatten(a_st.v).tobytes() == flatten(d_st.v).tobytes()


def test_adam_rejects_non_finite_gradient_by_block():
    net = init_mlp((2, 3, 3, 1), Rng(0))
    g = net.zeros_like()
    g.biases[1][0] = np.nan
    with pytest.raises(FloatingPointError, match="b1"):
        adam_step(net, AdamState.for_params(net), g)


def test_polyak_examples():
    online, target = init_mlp((2, 3, 3, 1), Rng(1)), init_mlp((2, 3, 3, 1), Rng(2))
    assert flatten(polyak_update(target, online, 1.0)).tobytes() == flatten(online).tobytes()
    assert flatten(polyak_update(target, online, 0.0)).tobytes() == flatten(target).tobytes()
    one, zero = const_net((1, 1, 1, 1), 1.0), const_net((1, 1, 1, 1), 0.0)
    assert polyak_update(zero, one, 0.005).weights[0][0, 0] == 0.005
    with pytest.raises(ShapeError):
        polyak_update(init_mlp((2, 3, 3, 1), Rng(0)), init_mlp((2, 4, 4, 1), Rng(0)), 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.001, 0.9), st.integers(1, 60))
def test_polyak_contraction(seed, tau, k):
    online, target = init_mlp((2, 3, 3, 1), Rng(seed)), init_mlp((2, 3, 3, 1), Rng(seed + 1))
    gap0 = np.max(np.abs(flatten(target) - flatten(online)))
    for _ in range(k):
        target = polyak_update(target, online, tau)
    gap = np.max(np.abs(flatten(target) - flatten(online)))
    assert gap <= (1 - tau) ** k * gap0 * (1 + 1e-9) + 1e-15
