import numpy as np
import pytest

from wassflow.potential import (Quadratic, Rosenbrock, StyblinskiTang, make_potential, potential_grad,
                                potential_value)


def test_quadratic_at_mean():
    v = Quadratic([3.0, 3.0], [[1.0, 0.2], [0.2, 0.5]])
    assert v.value(np.array([3.0, 3.0])) == 0.0
    assert np.array_equal(v.grad(np.array([3.0, 3.0])), np.zeros(2))


def test_styblinski_tang_values():
    assert StyblinskiTang(4).value(np.zeros(4)) == 0.0
    assert abs(StyblinskiTang(1).value(np.array([1.0])) + 0.6) < 1e-14
    assert abs(StyblinskiTang(1).grad(np.array([1.0]))[0] + 1.38) < 1e-14


def test_rosenbrock_minimum():
    r = Rosenbrock(5)
    assert r.value(np.ones(5)) == 0.0
    assert np.allclose(r.grad(np.ones(5)), 0.0)


@pytest.mark.parametrize("pot", [
    Quadratic([1.0, -2.0, 0.5], [[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]], beta=0.7),
    StyblinskiTang(3),
    Rosenbrock(4),
])
def test_gradients_match_finite_differences(pot):
    rng = np.random.default_rng(1)
    step = 1e-6
    for _ in range(100):
        x = rng.uniform(-2, 2, size=pot.dim)
        g = pot.grad(x)
        fd = np.array([(pot.value(x + step * e) - pot.value(x - step * e)) / (2 * step) for e in np.eye(pot.dim)])
        assert np.all(np.abs(fd - g) / (1 + np.abs(g)) <= 1e-6)


def test_batch_and_point_agree():
    pot = Rosenbrock(3)
    x = np.random.default_rng(2).normal(size=(6, 3))
    assert np.allclose(pot.value(x), [pot.value(p) for p in x])
    assert np.allclose(pot.grad(x), [pot.grad(p) for p in x])
    assert potential_value(pot, x[0]) == pot.value(x[0])
    assert np.array_equal(potential_grad(pot, x), pot.grad(x))


def test_quadratic_strong_convexity():
    sigma = np.array([[1.0, 0.4], [0.4, 0.25]])
    pot = Quadratic([0.0, 1.0], sigma)
    lam_min = np.linalg.eigvalsh(np.linalg.inv(sigma)).min()
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, y = rng.normal(size=(2, 2)) * 3
        assert (pot.grad(x) - pot.grad(y)) @ (x - y) >= lam_min * np.sum((x - y) ** 2) * (1 - 1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        StyblinskiTang(2).value(np.zeros(3))
    with pytest.raises(ValueError):
        Quadratic([0.0, 0.0], np.eye(2)).grad(np.zeros((4, 3)))


def test_invalid_parameters():
    with pytest.raises(ValueError):
        Quadratic([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        StyblinskiTang(2, scale=-1.0)
    with pytest.raises(ValueError):
        Rosenbrock(2, beta=0.0)


def test_make_potential():
    q = make_potential("quadratic", 2, mu=[3, 3], sigma=[0.25, 0.25])
    assert np.allclose(q.sigma, np.diag([0.25, 0.25]))
    assert make_potential("styblinski-tang", 1).scale == 3 / 50
    assert make_potential("rosenbrock", 3, curvature=5).curvature == 5
    with pytest.raises(ValueError, match="unknown potential"):
        make_potential("banana", 2)
