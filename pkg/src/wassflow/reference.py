"""Ground-truth oracles for validating the solvers.

* exact Gaussian marginals of the Ornstein-Uhlenbeck process generated by a
  quadratic potential,
* the affine pushforward ODE (Gamma, b) whose pushforward of N(0, I) solves
  the same Fokker-Planck equation exactly,
* an Euler-Maruyama particle simulator for the overdamped Langevin SDE,
* closed-form W2 (Bures) and KL between Gaussians.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import Rng, mat_sqrt_spd, symmetrize
from .potential import Quadratic


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")


@dataclass
class AffineState:
    gamma: np.ndarray
    b: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))

    def pushforward(self) -> GaussianState:
        """Law of gamma X + b for X ~ N(0, I)."""
        return GaussianState(self.b.copy(), self.gamma @ self.gamma.T)


def gibbs_state(potential: Quadratic) -> GaussianState:
    """Stationary law N(mu, beta Sigma) of the quadratic potential."""
    return GaussianState(potential.mu.copy(), potential.beta * potential.sigma)


def ou_exact(potential: Quadratic, init: GaussianState, t: float, beta: float | None = None) -> GaussianState:
    """Exact time-t marginal of dX = -Sigma^{-1}(X - mu) dt + sqrt(2 beta) dB.

    Requires Sigma and the initial covariance to commute, which makes
    m(t) = mu + E (m0 - mu) and S(t) = beta Sigma + E (S0 - beta Sigma) E
    with E = exp(-Sigma^{-1} t).
    """
    if not isinstance(potential, Quadratic):
        raise TypeError("exact solutions exist only for the quadratic potential")
    beta = potential.beta if beta is None else beta
    if beta <= 0:
        raise ValueError("beta must be positive")
    sigma, s0 = potential.sigma, init.cov
    if np.max(np.abs(sigma @ s0 - s0 @ sigma)) > 1e-10:
        raise ValueError("exact solution requires commuting covariances")
    lam, q = np.linalg.eigh(sigma)
    e = (q * np.exp(-t / lam)) @ q.T
    mean = potential.mu + e @ (init.mean - potential.mu)
    cov = beta * sigma + e @ (s0 - beta * sigma) @ e
    return GaussianState(mean, symmetrize(cov))


def _affine_rhs(prec, mu, beta, gamma, b):
    dgamma = -prec @ gamma + beta * np.linalg.inv(gamma).T
    db = prec @ (mu - b)
    return dgamma, db


def _rk4_step(prec, mu, beta, gamma, b, h):
    k1g, k1b = _affine_rhs(prec, mu, beta, gamma, b)
    k2g, k2b = _affine_rhs(prec, mu, beta, gamma + 0.5 * h * k1g, b + 0.5 * h * k1b)
    k3g, k3b = _affine_rhs(prec, mu, beta, gamma + 0.5 * h * k2g, b + 0.5 * h * k2b)
    k4g, k4b = _affine_rhs(prec, mu, beta, gamma + h * k3g, b + h * k3b)
    gamma = gamma + (h / 6.0) * (k1g + 2 * k2g + 2 * k3g + k4g)
    b = b + (h / 6.0) * (k1b + 2 * k2b + 2 * k3b + k4b)
    return gamma, b


def _rk4_step_2x2(prec, mu, beta, gamma, b, h):
    """Same update for d = 2 on plain floats; numpy call overhead dominates at this size."""
    p00, p01, p10, p11 = prec
    m0, m1 = mu

    def rhs(z):
        g00, g01, g10, g11, b0, b1 = z
        s = beta / (g00 * g11 - g01 * g10)
        return (
            -(p00 * g00 + p01 * g10) + s * g11,
            -(p00 * g01 + p01 * g11) - s * g10,
            -(p10 * g00 + p11 * g10) - s * g01,
            -(p10 * g01 + p11 * g11) + s * g00,
            p00 * (m0 - b0) + p01 * (m1 - b1),
            p10 * (m0 - b0) + p11 * (m1 - b1),
        )

    z = (*gamma, *b)
    k1 = rhs(z)
    k2 = rhs([zi + 0.5 * h * ki for zi, ki in zip(z, k1)])
    k3 = rhs([zi + 0.5 * h * ki for zi, ki in zip(z, k2)])
    k4 = rhs([zi + h * ki for zi, ki in zip(z, k3)])
    z = [zi + (h / 6.0) * (a + 2 * b_ + 2 * c + d) for zi, a, b_, c, d in zip(z, k1, k2, k3, k4)]
    return z[:4], z[4:]


def affine_flow_ode_solve(potential: Quadratic, init: AffineState, t_end: float,
                          rk4_h: float = 1e-4, beta: float | None = None,
                          record_every: int = 1) -> list[AffineState]:
    """Classical RK4 for dGamma/dt = -Sigma^{-1} Gamma + beta Gamma^{-T}, db/dt = Sigma^{-1}(mu - b).

    Returns states at every ``record_every``-th multiple of ``rk4_h`` (plus
    the initial state); the last step is shortened to land on ``t_end``.
    """
    if rk4_h <= 0:
        raise ValueError("rk4_h must be positive")
    beta = potential.beta if beta is None else beta
    prec, mu = potential.precision, potential.mu
    gamma, b = init.gamma.copy(), init.b.copy()
    if np.linalg.det(gamma) < 1e-12:
        raise ValueError("flow map degenerated")
    d = gamma.shape[0]
    if d == 2:
        step, prec, mu = _rk4_step_2x2, prec.ravel().tolist(), mu.tolist()
        gamma, b = gamma.ravel().tolist(), b.tolist()
    else:
        step = _rk4_step
    t = init.t
    out = [AffineState(np.reshape(gamma, (d, d)).copy(), np.array(b, dtype=float), t)]
    n = int(np.ceil((t_end - t) / rk4_h - 1e-9))
    for i in range(n):
        gamma, b = step(prec, mu, beta, gamma, b, min(rk4_h, t_end - t))
        t = init.t + (i + 1) * rk4_h if i + 1 < n else t_end
        if (i + 1) % record_every == 0 or i + 1 == n:
            g = np.array(gamma, dtype=float).reshape(d, d)
            if not np.all(np.isfinite(g)) or np.linalg.det(g) < 1e-12:
                raise ValueError("flow map degenerated")
            out.append(AffineState(g, np.array(b, dtype=float), t))
    return out


def euler_maruyama(potential, x0, dt: float, steps: int, rng: Rng, beta: float | None = None) -> np.ndarray:
    """X <- X - grad V(X) dt + sqrt(2 beta dt) xi for ``steps`` steps."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    beta = potential.beta if beta is None else beta
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    noise = np.sqrt(2.0 * beta * dt)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            x = x - dt * potential.grad(x)
            if noise > 0.0:
                x = x + noise * rng.normal(x.shape)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError("SDE trajectory diverged")
    return x


def _check_spd(s):
    lam = np.linalg.eigvalsh(symmetrize(s))
    if lam.min() <= 0:
        raise ValueError("covariance must be symmetric positive definite")


def gaussian_w2(a: GaussianState, b: GaussianState) -> float:
    """Bures-Wasserstein distance between two Gaussians."""
    _check_spd(a.cov)
    _check_spd(b.cov)
    rb = mat_sqrt_spd(b.cov)
    cross = mat_sqrt_spd(rb @ a.cov @ rb)
    bures = np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    dm = a.mean - b.mean
    return float(np.sqrt(max(float(dm @ dm) + bures, 0.0)))


def gaussian_kl(a: GaussianState, b: GaussianState) -> float:
    """KL(a || b)."""
    _check_spd(a.cov)
    _check_spd(b.cov)
    d = a.mean.size
    sb_inv = np.linalg.inv(b.cov)
    dm = b.mean - a.mean
    _, logdet_a = np.linalg.slogdet(a.cov)
    _, logdet_b = np.linalg.slogdet(b.cov)
    kl = 0.5 * (np.trace(sb_inv @ a.cov) + dm @ sb_inv @ dm - d + logdet_b - logdet_a)
    return float(max(kl, 0.0))
