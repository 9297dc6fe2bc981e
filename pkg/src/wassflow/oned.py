"""Exact one-dimensional path of the parametric Fokker-Planck ODE.

In one dimension the Wasserstein metric pulled back to parameter space is
explicit, G(theta) = E_p[d_theta T^T d_theta T], so the ODE
theta' = -G^{-1} grad H can be integrated without any dual network.  All
expectations under p = N(0, 1) are Gauss-Hermite quadratures, which keeps
these diagnostics free of Monte-Carlo noise.

Two families are supported: the affine map T(x) = theta1 x + theta2 and a
one-dimensional planar flow.  Each provides T, T', T'' and the parameter
derivatives of T and T' at the quadrature nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import cho_factor, cho_solve

from .flow import W_ZERO_TOL, FlowParams, _sigmoid, _softplus
from .potential import Quadratic

METRIC_JITTER = 1e-12
MAX_CONDITION = 1e12


class FlowDerivs(NamedTuple):
    t: np.ndarray  # T(x), (Q,)
    tp: np.ndarray  # T'(x)
    tpp: np.ndarray  # T''(x)
    dt: np.ndarray  # d_theta T, (m, Q)
    dtp: np.ndarray  # d_theta T', (m, Q)


@dataclass(frozen=True)
class Affine:
    """T(x) = theta1 x + theta2 with theta1 > 0."""

    theta1: float
    theta2: float

    def __post_init__(self):
        if not (np.isfinite(self.theta1) and np.isfinite(self.theta2)):
            raise ValueError("non-finite flow parameters")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])

    def with_params(self, theta) -> "Affine":
        theta1, theta2 = (float(v) for v in theta)
        return Affine(theta1, theta2)

    def derivs(self, x) -> FlowDerivs:
        x = np.asarray(x, dtype=float)
        one, zero = np.ones_like(x), np.zeros_like(x)
        return FlowDerivs(
            self.theta1 * x + self.theta2,
            self.theta1 * one,
            zero,
            np.stack([x, one]),
            np.stack([one, zero]),
        )


@dataclass(frozen=True)
class Planar1D:
    """Planar flow with d = 1; parameters in FlowParams flat order (w, u_raw, b per layer)."""

    flow: FlowParams = field(compare=False)

    def __post_init__(self):
        if self.flow.dim != 1:
            raise ValueError("Planar1D needs a one-dimensional flow")

    @property
    def params(self) -> np.ndarray:
        return self.flow.flatten()

    def with_params(self, theta) -> "Planar1D":
        return Planar1D(FlowParams.from_flat(theta, 1))

    def derivs(self, x) -> FlowDerivs:
        # forward-mode propagation of (x, p = dx/dx0, q = d2x/dx0^2) and the
        # parameter tangents of x and p through every layer
        x = np.array(x, dtype=float)
        n = x.size
        m = self.flow.size
        p, q = np.ones(n), np.zeros(n)
        dx, dp = np.zeros((m, n)), np.zeros((m, n))
        w_all, u_all, b_all = self.flow.w[:, 0], self.flow.u_raw[:, 0], self.flow.b
        for k in range(self.flow.length):
            w, u, b = w_all[k], u_all[k], b_all[k]
            if abs(w) > W_ZERO_TOL:
                a = w * u
                mval = _softplus(a) - 1.0
                sig = _sigmoid(a)
                uh, c = mval / w, mval
                duh_dw, duh_du = (sig * a - mval) / (w * w), sig
                dc_dw, dc_du = sig * u, sig * w
            else:
                uh, c = u, 0.0
                duh_dw, duh_du = 0.0, 1.0
                dc_dw, dc_du = u, 0.0
            s = w * x + b
            t = np.tanh(s)
            sech2 = 1.0 - t * t
            jac = 1.0 + sech2 * c
            dsech2_ds = -2.0 * t * sech2

            # chain through the incoming state
            ds = w * dx
            iw, iu, ib = 3 * k, 3 * k + 1, 3 * k + 2
            ds[iw] += x
            ds[ib] += 1.0
            new_dx = dx + uh * sech2 * ds
            new_dx[iw] += t * duh_dw
            new_dx[iu] += t * duh_du
            new_dp = dp * jac + p * c * dsech2_ds * ds
            new_dp[iw] += p * sech2 * dc_dw
            new_dp[iu] += p * sech2 * dc_du

            q = q * jac + p * p * c * dsech2_ds * w
            p = p * jac
            x = x + t * uh
            dx, dp = new_dx, new_dp
        return FlowDerivs(x, p, q, dx, dp)


Flow1D = Union[Affine, Planar1D]


@dataclass(frozen=True)
class Quadrature:
    """Gauss-Hermite rule for expectations under N(0, 1)."""

    order: int = 100
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("quadrature order must be positive")
        x, w = hermegauss(self.order)
        if not np.all(np.isfinite(w)):
            raise ValueError(f"Gauss-Hermite rule of order {self.order} is not representable")
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "weights", w / np.sqrt(2.0 * np.pi))

    def expect(self, values) -> np.ndarray:
        """Integrate the trailing axis of ``values`` against p."""
        return np.asarray(values) @ self.weights


def _eval(flow: Flow1D, quad: Quadrature) -> FlowDerivs:
    d = flow.derivs(quad.nodes)
    if not np.all(np.isfinite(d.tp)) or np.any(d.tp <= 0.0):
        raise ValueError("flow not invertible on support")
    return d


def _check_potential(potential):
    if potential.dim != 1:
        raise ValueError("the exact path needs a one-dimensional potential")


def metric_1d(flow: Flow1D, quad: Quadrature | None = None) -> np.ndarray:
    """G(theta) = E_p[d_theta T d_theta T^T]."""
    quad = quad or Quadrature()
    d = _eval(flow, quad)
    g = (d.dt * quad.weights) @ d.dt.T
    return 0.5 * (g + g.T)


def entropy_1d(flow: Flow1D, potential, quad: Quadrature | None = None) -> float:
    """H(theta) = E_p[V(T) + beta (log p - log T')]."""
    _check_potential(potential)
    quad = quad or Quadrature()
    d = _eval(flow, quad)
    logp = -0.5 * np.log(2.0 * np.pi) - 0.5 * quad.nodes**2
    v = potential.value(d.t[:, None])
    return float(quad.expect(v + potential.beta * (logp - np.log(d.tp))))


def grad_H_1d(flow: Flow1D, potential, quad: Quadrature | None = None) -> np.ndarray:
    """grad H = E_p[V'(T) d_theta T - beta d_theta T' / T']."""
    _check_potential(potential)
    quad = quad or Quadrature()
    d = _eval(flow, quad)
    vp = potential.grad(d.t[:, None])[:, 0]
    return quad.expect(vp * d.dt - potential.beta * d.dtp / d.tp)


def _solve_metric(g, rhs):
    lam = np.linalg.eigvalsh(g)
    if lam[0] <= 0.0 or lam[-1] > MAX_CONDITION * lam[0]:
        raise np.linalg.LinAlgError("metric degenerate")
    factor = cho_factor(g + METRIC_JITTER * np.eye(g.shape[0]))
    return cho_solve(factor, rhs)


def natural_gradient_1d(flow: Flow1D, potential, quad: Quadrature | None = None) -> np.ndarray:
    """G^{-1} grad H, the parameter velocity is its negative."""
    quad = quad or Quadrature()
    return _solve_metric(metric_1d(flow, quad), grad_H_1d(flow, potential, quad))


def forward_euler_solve_1d(flow0: Flow1D, potential, h: float, n_steps: int,
                           quad: Quadrature | None = None) -> list:
    """theta_{n+1} = theta_n - h G(theta_n)^{-1} grad H(theta_n); returns all N + 1 states."""
    if h <= 0:
        raise ValueError("h must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    quad = quad or Quadrature()
    traj = [flow0]
    flow = flow0
    for _ in range(n_steps):
        xi = natural_gradient_1d(flow, potential, quad)
        theta = flow.params - h * xi
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("parameters became non-finite")
        flow = flow.with_params(theta)
        traj.append(flow)
    return traj


def delta1_terms(flow: Flow1D, potential, quad: Quadrature | None = None) -> tuple[float, float]:
    """(fisher_term, gradient_term) whose difference is the projection residual.

    fisher_term = E_p[v(T)^2] with v = V' + beta d/dy log rho and
    d/dy log rho(T(x)) = (-x - T''/T') / T'.  The gradient term is
    g^T G^{-1} g with g = E_p[v(T) d_theta T], which equals grad H after an
    integration by parts.  Using this form keeps both terms on the same
    quadrature, so their difference is a discrete least-squares residual and
    cannot go negative beyond rounding even when G is badly conditioned.
    """
    _check_potential(potential)
    quad = quad or Quadrature()
    d = _eval(flow, quad)
    vp = potential.grad(d.t[:, None])[:, 0]
    v = vp + potential.beta * (-quad.nodes - d.tpp / d.tp) / d.tp
    fisher = float(quad.expect(v * v))
    g = metric_1d(flow, quad)
    gh = quad.expect(v * d.dt)
    return fisher, float(gh @ _solve_metric(g, gh))


def delta1_residual_1d(flow: Flow1D, potential, quad: Quadrature | None = None) -> float:
    """Squared L2 distance of the true velocity field from the family's tangent space."""
    fisher, grad_term = delta1_terms(flow, potential, quad)
    return max(0.0, fisher - grad_term)


def affine_quadratic_exact_1d(flow0: Affine, potential: Quadratic, t: float) -> Affine:
    """Closed-form affine trajectory for V = (y - mu)^2 / (2 sigma).

    theta1^2 relaxes to beta sigma at rate 2/sigma and theta2 to mu at rate 1/sigma.
    """
    if not isinstance(potential, Quadratic) or potential.dim != 1:
        raise TypeError("closed form needs a one-dimensional quadratic potential")
    sigma, mu, beta = float(potential.sigma[0, 0]), float(potential.mu[0]), potential.beta
    s2 = beta * sigma + (flow0.theta1**2 - beta * sigma) * np.exp(-2.0 * t / sigma)
    return Affine(float(np.sqrt(s2)), float(mu + (flow0.theta2 - mu) * np.exp(-t / sigma)))


def pushforward_moments_1d(flow: Flow1D, quad: Quadrature | None = None) -> tuple[float, float]:
    """Mean and variance of T_# p."""
    quad = quad or Quadrature()
    t = flow.derivs(quad.nodes).t
    mean = float(quad.expect(t))
    return mean, float(quad.expect((t - mean) ** 2))
