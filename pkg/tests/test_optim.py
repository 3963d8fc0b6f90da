import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pflsim.models import ArchDescriptor, init_params
from pflsim.optim import ServerOptState, server_apply, sgd_step


def _params(values):
    arch = ArchDescriptor("linear_regression", len(values) - 1)
    return init_params(arch).with_values(np.asarray(values, dtype=float))


def test_sgd_examples():
    p = _params([1.0, 1.0])
    np.testing.assert_array_equal(sgd_step(p, np.array([1.0, -1.0]), 0.5).values, [0.5, 1.5])
    assert sgd_step(p, np.zeros(2), 0.1) == p
    g = np.array([0.3, -0.7])
    np.testing.assert_allclose(sgd_step(sgd_step(p, g, 0.25), g, 0.25).values, sgd_step(p, g, 0.5).values,
                               rtol=0, atol=1e-15)


@pytest.mark.parametrize("lr", [0.0, -1.0])
def test_sgd_rejects_nonpositive_lr(lr):
    with pytest.raises(ValueError):
        sgd_step(_params([1.0, 1.0]), np.zeros(2), lr)


def test_sgd_rejects_length_mismatch():
    with pytest.raises(ValueError):
        sgd_step(_params([1.0, 1.0]), np.zeros(3), 0.1)


def test_avg_is_plain_averaging():
    p = _params([1.0, 2.0])
    new, st_ = server_apply(ServerOptState.create("avg", 1.0, 2), p, np.array([0.5, -1.0]))
    np.testing.assert_array_equal(new.values, [0.5, 3.0])


def test_adam_first_step():
    p = _params([0.0, 0.0])
    state = ServerOptState.create("adam", 0.001, 2, epsilon=1e-3)
    new, s2 = server_apply(state, p, np.array([1.0, 1.0]))
    np.testing.assert_allclose(new.values, -0.001 / (1 + 1e-3), rtol=1e-14)
    assert s2.t == 1 and state.t == 0 and not state.m.any()


def test_fedavgm_two_rounds():
    p = _params([0.0, 0.0])
    state = ServerOptState.create("fedavgm", 0.5, 2)
    g = np.array([2.0, 2.0])
    p1, s1 = server_apply(state, p, g)
    p2, _ = server_apply(s1, p1, g)
    assert p1.values[0] - p2.values[0] == pytest.approx(0.5 * 1.9 * 2.0, abs=1e-15)


def adam_reference(gs, lr, b1, b2, eps):
    """Scalar Adam with bias correction, written as a plain loop."""
    x, m, v = 0.0, 0.0, 0.0
    out = []
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def test_adam_matches_scalar_reference_on_100_sequences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(1, 30))
        gs = rng.standard_normal((T, 3)) * rng.uniform(0.01, 10)
        lr = float(rng.uniform(1e-3, 1.0))
        state = ServerOptState.create("adam", lr, 3)
        p = _params([0.0, 0.0, 0.0])
        traj = []
        for g in gs:
            p, state = server_apply(state, p, g)
            traj.append(p.values.copy())
        for j in range(3):
            ref = adam_reference(gs[:, j], lr, 0.9, 0.99, 1e-3)
            np.testing.assert_allclose([t[j] for t in traj], ref, rtol=0, atol=1e-12)


@given(st.sampled_from(["avg", "adam", "fedavgm"]), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_server_apply_is_pure(kind, g):
    p = _params([1.0, -1.0])
    state = ServerOptState.create(kind, 0.1, 2)
    a = server_apply(state, p, np.array(g))
    b = server_apply(state, p, np.array(g))
    assert a[0] == b[0] and a[1].to_dict() == b[1].to_dict()
    assert np.array_equal(p.values, [1.0, -1.0])


def test_state_serialization_round_trip():
    state = ServerOptState.create("adam", 0.1, 2)
    _, s2 = server_apply(state, _params([0.0, 0.0]), np.array([1.0, 2.0]))
    back = ServerOptState.from_dict(s2.to_dict())
    assert back.to_dict() == s2.to_dict()


def test_defaults():
    s = ServerOptState.create("adam", 0.1, 1)
    assert (s.beta1, s.beta2, s.momentum) == (0.9, 0.99, 0.9)
    with pytest.raises(ValueError):
        ServerOptState.create("sgd", 0.1, 1)
    with pytest.raises(ValueError):
        server_apply(ServerOptState.create("avg", 1.0, 1), _params([0.0, 0.0]), np.zeros(3))
