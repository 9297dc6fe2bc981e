"""Analytic confining potentials V with exact gradients.

The set of potentials is closed on purpose: the validation oracles in
:mod:`wassflow.reference` dispatch on :class:`Quadratic` to find the exact
Ornstein-Uhlenbeck solution.  All evaluations accept a single point of shape
(d,) or a batch of shape (K, d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

DEFAULT_SCALE = 3.0 / 50.0


def _points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"dimension mismatch: potential has d={dim}, got {x.shape[1]}")
    return x, single


@dataclass(frozen=True, eq=False)
class Quadratic:
    """V(x) = (x - mu)^T Sigma^{-1} (x - mu) / 2."""

    mu: np.ndarray
    sigma: np.ndarray
    beta: float = 1.0
    _chol: tuple = field(init=False, repr=False, compare=False)
    _prec: np.ndarray = field(init=False, repr=False, compare=False)

    name = "quadratic"

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim == 1:
            sigma = np.diag(sigma)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError("sigma must be a d x d matrix matching mu")
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        sigma = 0.5 * (sigma + sigma.T)
        try:
            chol = cho_factor(sigma, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("sigma must be positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec", cho_solve(chol, np.eye(mu.size)))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def precision(self) -> np.ndarray:
        return self._prec

    def value(self, x):
        x, single = _points(x, self.dim)
        r = x - self.mu
        v = 0.5 * np.einsum("ki,ki->k", r, cho_solve(self._chol, r.T).T)
        return v[0] if single else v

    def grad(self, x):
        x, single = _points(x, self.dim)
        g = cho_solve(self._chol, (x - self.mu).T).T
        return g[0] if single else g


@dataclass(frozen=True)
class StyblinskiTang:
    """V(x) = scale * sum_i (x_i^4 - 16 x_i^2 + 5 x_i)."""

    dim: int
    scale: float = DEFAULT_SCALE
    beta: float = 1.0

    name = "styblinski_tang"

    def __post_init__(self):
        if self.scale <= 0 or self.beta <= 0 or self.dim < 1:
            raise ValueError("styblinski_tang needs dim >= 1, scale > 0, beta > 0")

    def value(self, x):
        x, single = _points(x, self.dim)
        x2 = x * x
        v = self.scale * np.sum(x2 * x2 - 16.0 * x2 + 5.0 * x, axis=1)
        return v[0] if single else v

    def grad(self, x):
        x, single = _points(x, self.dim)
        g = self.scale * (4.0 * x**3 - 32.0 * x + 5.0)
        return g[0] if single else g


@dataclass(frozen=True)
class Rosenbrock:
    """V(x) = scale * sum_{k<d} [curvature (x_{k+1} - x_k^2)^2 + (x_k - 1)^2]."""

    dim: int
    scale: float = DEFAULT_SCALE
    curvature: float = 10.0
    beta: float = 1.0

    name = "rosenbrock"

    def __post_init__(self):
        if self.scale <= 0 or self.beta <= 0 or self.dim < 1:
            raise ValueError("rosenbrock needs dim >= 1, scale > 0, beta > 0")

    def value(self, x):
        x, single = _points(x, self.dim)
        head, tail = x[:, :-1], x[:, 1:]
        v = self.scale * np.sum(
            self.curvature * (tail - head**2) ** 2 + (head - 1.0) ** 2, axis=1
        )
        return v[0] if single else v

    def grad(self, x):
        x, single = _points(x, self.dim)
        head, tail = x[:, :-1], x[:, 1:]
        resid = tail - head**2
        g = np.zeros_like(x)
        g[:, :-1] += -4.0 * self.curvature * head * resid + 2.0 * (head - 1.0)
        g[:, 1:] += 2.0 * self.curvature * resid
        g *= self.scale
        return g[0] if single else g


PotentialSpec = Quadratic | StyblinskiTang | Rosenbrock


def potential_value(spec, x):
    return spec.value(x)


def potential_grad(spec, x):
    return spec.grad(x)


def make_potential(name: str, dim: int, beta: float = 1.0, **params):
    """Build a potential from its config name and parameter block."""
    name = name.replace("-", "_").lower()
    if name == "quadratic":
        mu = params.get("mu")
        sigma = params.get("sigma")
        mu = np.zeros(dim) if mu is None else np.asarray(mu, dtype=float)
        sigma = np.eye(dim) if sigma is None else np.asarray(sigma, dtype=float)
        if mu.size != dim:
            raise ValueError(f"mu has {mu.size} entries, expected {dim}")
        return Quadratic(mu, sigma, beta=beta)
    scale = params.get("scale")
    scale = DEFAULT_SCALE if scale is None else float(scale)
    if name == "styblinski_tang":
        return StyblinskiTang(dim, scale=scale, beta=beta)
    if name == "rosenbrock":
        curvature = params.get("curvature")
        curvature = 10.0 if curvature is None else float(curvature)
        return Rosenbrock(dim, scale=scale, curvature=curvature, beta=beta)
    raise ValueError(f"unknown potential {name!r}; expected quadratic | styblinski_tang | rosenbrock")
