import numpy as np
import pytest

from wassflow.optim import AdamState, adam_step, sgd_step


def test_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    new, st = adam_step(AdamState.zeros(2), p, np.zeros(2), 0.1)
    assert np.array_equal(new, p) and st.t == 1


def test_first_step_hand_value():
    new, _ = adam_step(AdamState.zeros(1), np.zeros(1), np.ones(1), 0.1)
    assert new[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_is_pure():
    st = AdamState.zeros(3)
    p, g = np.ones(3), np.array([0.1, -0.2, 0.3])
    a = adam_step(st.copy(), p, g, 0.01)
    b = adam_step(st.copy(), p, g, 0.01)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].m, b[1].m)
    assert st.t == 0 and not st.m.any()


def test_constant_gradient_step_bound():
    st, p = AdamState.zeros(2), np.zeros(2)
    for t in range(1, 50):
        new, st = adam_step(st, p, np.array([3.0, -0.01]), 0.01)
        if t >= 10:
            assert np.all(np.abs(new - p) <= 1.001 * 0.01)
        p = new


def test_state_isolation():
    rng = np.random.default_rng(0)
    ga, gb = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    sa, sb, pa, pb = AdamState.zeros(3), AdamState.zeros(2), np.zeros(3), np.zeros(2)
    for a, b in zip(ga, gb):
        pa, sa = adam_step(sa, pa, a, 0.1)
        pb, sb = adam_step(sb, pb, b, 0.1)
    s, q = AdamState.zeros(3), np.zeros(3)
    for a in ga:
        q, s = adam_step(s, q, a, 0.1)
    assert np.array_equal(q, pa)


def test_validation():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3), 0.1)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(1), np.zeros(1), np.zeros(1), 0.0)
    with pytest.raises(ValueError):
        sgd_step(np.zeros(2), np.zeros(3), 0.1)


def test_sgd():
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0.5)[0] == 0.0
    p = np.array([0.3, 0.7])
    assert np.array_equal(sgd_step(p, np.zeros(2), 0.1), p)
    g1, g2 = np.array([1.0, 2.0]), np.array([-0.5, 0.25])
    assert np.allclose(sgd_step(p, g1 + g2, 0.1), sgd_step(sgd_step(p, g1, 0.1), g2, 0.1))
