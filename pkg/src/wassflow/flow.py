"""Planar normalizing flow T_theta = f_K o ... o f_1 with f(x) = x + tanh(w.x + b) u_hat.

Invertibility (w.u_hat > -1) is enforced by reparameterizing u_hat from an
unconstrained u_raw, so optimizers can move every parameter freely.  The
parameters of a K-layer flow in d dimensions are stored as three arrays
``w`` (K, d), ``u_raw`` (K, d) and ``b`` (K,); their flat form lists each
layer as (w, u_raw, b) in order.

Gradients with respect to the parameters are written out by hand
(:func:`flow_vjp_theta`) and checked against finite differences in the test
suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numkit import Rng

LOG_E_MINUS_1 = float(np.log(np.expm1(1.0)))
FORMAT_HEADER = "wassflow-flow v1"
# layers with |w| below this are treated as w = 0 (u_hat = u_raw); the
# reparameterization divides by |w|^2 and would overflow
W_ZERO_TOL = 1e-100


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class PlanarLayer(NamedTuple):
    w: np.ndarray
    u_raw: np.ndarray
    b: float


@dataclass
class FlowParams:
    w: np.ndarray
    u_raw: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        self.u_raw = np.atleast_2d(np.asarray(self.u_raw, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.w.shape != self.u_raw.shape or self.b.shape != (self.w.shape[0],):
            raise ValueError("inconsistent layer shapes")
        if self.w.shape[0] < 1:
            raise ValueError("a flow needs at least one layer")

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @property
    def length(self) -> int:
        return self.w.shape[0]

    @property
    def size(self) -> int:
        return self.length * (2 * self.dim + 1)

    @property
    def layers(self) -> list[PlanarLayer]:
        return [PlanarLayer(self.w[k], self.u_raw[k], float(self.b[k])) for k in range(self.length)]

    def copy(self) -> "FlowParams":
        return FlowParams(self.w.copy(), self.u_raw.copy(), self.b.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w, self.u_raw, self.b[:, None]], axis=1).ravel()

    @classmethod
    def from_flat(cls, flat, dim: int) -> "FlowParams":
        rows = np.asarray(flat, dtype=float).reshape(-1, 2 * dim + 1)
        return cls(rows[:, :dim].copy(), rows[:, dim : 2 * dim].copy(), rows[:, -1].copy())

    @classmethod
    def from_layers(cls, layers) -> "FlowParams":
        layers = list(layers)
        return cls(
            np.array([l.w for l in layers], dtype=float),
            np.array([l.u_raw for l in layers], dtype=float),
            np.array([l.b for l in layers], dtype=float),
        )

    @classmethod
    def zeros(cls, dim: int, length: int) -> "FlowParams":
        """All layers w = 0, b = 0, u_raw = 0: the exact identity map."""
        return cls(np.zeros((length, dim)), np.zeros((length, dim)), np.zeros(length))

    @classmethod
    def identity(cls, dim: int, length: int, rng: Rng, w_scale: float = 1.0,
                 b_scale: float = 0.0) -> "FlowParams":
        """Identity map with trainable, non-degenerate layers.

        Each w is a random direction of norm ``w_scale`` and u_raw is chosen so
        that the constrained u_hat vanishes (softplus(w.u_raw) = 1).  Unlike the
        all-zero configuration this point has non-zero parameter gradients.
        Biases are N(0, b_scale^2); the map stays the identity for any b, but
        with b = 0 every tangent direction tanh(w.x) u is odd in x and the flow
        cannot translate to first order.
        """
        w = rng.normal((length, dim))
        w *= w_scale / np.linalg.norm(w, axis=1, keepdims=True)
        u_raw = LOG_E_MINUS_1 * w / np.sum(w * w, axis=1, keepdims=True)
        b = b_scale * rng.normal(length) if b_scale > 0 else np.zeros(length)
        return cls(w, u_raw, b)

    def to_text(self) -> str:
        lines = [FORMAT_HEADER, f"{self.dim} {self.length}"]
        for k in range(self.length):
            vals = list(self.w[k]) + list(self.u_raw[k]) + [self.b[k]]
            lines.append(" ".join(f"{v:.17g}" for v in vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FlowParams":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != FORMAT_HEADER:
            raise ValueError(f"expected header {FORMAT_HEADER!r}")
        dim, length = (int(t) for t in lines[1].split())
        rows = np.array([[float(t) for t in ln.split()] for ln in lines[2:]])
        if rows.shape != (length, 2 * dim + 1):
            raise ValueError("layer table does not match the declared d and K")
        return cls.from_flat(rows.ravel(), dim)


def constrain_u(w, u_raw) -> np.ndarray:
    """u_hat = u_raw + (m(w.u_raw) - w.u_raw) w / |w|^2 with m(a) = softplus(a) - 1.

    Works on a single layer (vectors) or row-wise on (K, d) arrays.  A zero w
    (|w| <= W_ZERO_TOL) leaves u_raw untouched.
    """
    w = np.asarray(w, dtype=float)
    u_raw = np.asarray(u_raw, dtype=float)
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(u_raw))):
        raise ValueError("non-finite layer parameters")
    a = np.sum(w * u_raw, axis=-1, keepdims=True)
    n2 = np.sum(w * w, axis=-1, keepdims=True)
    nz = n2 > W_ZERO_TOL**2
    safe = np.where(nz, n2, 1.0)
    g = np.where(nz, (_softplus(a) - 1.0 - a) / safe, 0.0)
    return u_raw + g * w


def _layer_consts(params: FlowParams):
    """Per-layer u_hat, c = w.u_hat and the pieces needed by the backward pass."""
    w, u = params.w, params.u_raw
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(u)) and np.all(np.isfinite(params.b))):
        raise ValueError("non-finite layer parameters")
    a = np.sum(w * u, axis=1)
    n2 = np.sum(w * w, axis=1)
    nz = n2 > W_ZERO_TOL**2
    safe = np.where(nz, n2, 1.0)
    m = _softplus(a) - 1.0
    g = np.where(nz, (m - a) / safe, 0.0)
    u_hat = u + g[:, None] * w
    c = np.where(nz, m, np.sum(w * u_hat, axis=1))
    # 1 + c evaluated without cancellation; softplus(a) stays positive when m rounds to -1
    c1 = np.where(nz, _softplus(a), 1.0 + c)
    return u_hat, c, c1, a, n2, nz, g, m


def _log_jac(t, c, c1):
    """log(1 + sech^2 c) with sech^2 = 1 - t^2, accurate for c near -1 and near 0."""
    if c1 < 0.5:
        return np.log(t * t + (1.0 - t * t) * c1)
    s = t * t
    s -= 1.0
    s *= -c
    return np.log1p(s)


def layer_forward(layer: PlanarLayer, x) -> tuple[np.ndarray, np.ndarray]:
    """One planar layer on a point (d,) or batch (K, d)."""
    x = np.asarray(x, dtype=float)
    single = FlowParams(np.atleast_1d(layer.w)[None], np.atleast_1d(layer.u_raw)[None], [layer.b])
    u_hat, c, c1, *_ = _layer_consts(single)
    t = np.tanh(x @ single.w[0] + layer.b)
    y = x + np.multiply.outer(t, u_hat[0])
    return y, _log_jac(t, c[0], c1[0])


@dataclass
class ForwardTrace:
    """Inputs x_k (stored as (d, K)) and activations tanh(w_k.x_k + b_k) of every layer."""

    inputs: list
    tanh: list
    params_id: int
    count: int


def flow_forward(params: FlowParams, batch, record: bool = False, with_logdet: bool = True):
    """Push a (K, d) batch through the flow.

    Returns ``(out, logdets, trace)``; ``logdets[i]`` is log|det dT/dx| at
    ``batch[i]`` (None when ``with_logdet`` is off) and ``trace`` is None
    unless ``record`` is set.
    """
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError(f"dimension mismatch: flow has d={params.dim}, batch is {x.shape}")
    u_hat, c, c1, *_ = _layer_consts(params)
    logdet = np.zeros(x.shape[0]) if with_logdet else None
    inputs, tanhs = [], []
    w, b = params.w, params.b
    # column layout (d, K) keeps the per-layer work on contiguous rows
    xt = np.array(x.T, order="C")
    for k in range(params.length):
        t = w[k] @ xt
        t += b[k]
        np.tanh(t, out=t)
        if record:
            inputs.append(xt)
            tanhs.append(t)
        if with_logdet:
            logdet += _log_jac(t, c[k], c1[k])
        xt = xt + u_hat[k][:, None] * t
    x = xt.T
    trace = ForwardTrace(inputs, tanhs, id(params), x.shape[0]) if record else None
    return x, logdet, trace


def std_normal_logpdf(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    return -0.5 * d * np.log(2.0 * np.pi) - 0.5 * np.sum(x * x, axis=-1)


def pushforward_logdensity(params: FlowParams, x, logdet):
    """log rho_theta(T_theta(x)) = log p(x) - log|det dT/dx|."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.dim:
        raise ValueError("dimension mismatch")
    return std_normal_logpdf(x) - logdet


def entropy_terms(params: FlowParams, potential, batch):
    """Per-sample V(T(X)) + beta log rho_theta(T(X)) for X in ``batch``."""
    y, logdet, _ = flow_forward(params, batch)
    return potential.value(y) + potential.beta * pushforward_logdensity(params, batch, logdet)


def entropy_estimate(params: FlowParams, potential, batch) -> float:
    """Monte-Carlo estimate of H(theta) = E_p[V(T X) + beta log rho_theta(T X)]."""
    return float(np.mean(entropy_terms(params, potential, batch)))


def flow_vjp_theta(params: FlowParams, trace: ForwardTrace, out_cotangent, logdet_cotangent) -> FlowParams:
    """Batch-averaged vector-Jacobian product with respect to the flow parameters.

    Computes (1/K) sum_i [(d out_i/d theta)^T out_cotangent_i
    + (d logdet_i/d theta) logdet_cotangent_i], differentiating through the
    u_hat reparameterization.  The result has the same layout as ``params``.
    """
    if trace is None or trace.params_id != id(params) or len(trace.inputs) != params.length:
        raise ValueError("trace was not recorded for these parameters")
    ybar = np.array(out_cotangent, dtype=float)
    lbar = np.asarray(logdet_cotangent, dtype=float)
    if lbar.ndim == 0:
        lbar = np.full(trace.count, float(lbar))
    if ybar.shape != (trace.count, params.dim) or lbar.shape != (trace.count,):
        raise ValueError("cotangent shapes do not match the traced batch")

    u_hat, c, c1, a, n2, nz, g, m = _layer_consts(params)
    gw = np.zeros_like(params.w)
    gu = np.zeros_like(params.u_raw)
    gb = np.zeros_like(params.b)
    ybar = np.array(ybar.T, order="C")
    for k in range(params.length - 1, -1, -1):
        xt, t = trace.inputs[k], trace.tanh[k]
        sech2 = 1.0 - t * t
        denom = t * t + sech2 * c1[k]
        # y = x + t u_hat ; logdet = log(1 + sech2 c)
        tbar = u_hat[k] @ ybar - lbar * 2.0 * t * c[k] / denom
        uhat_bar = ybar @ t
        cbar = np.dot(lbar, sech2 / denom)
        sbar = tbar * sech2
        gb[k] = sbar.sum()
        wbar = xt @ sbar
        xbar = ybar + np.outer(params.w[k], sbar)
        ubar = uhat_bar.copy()
        if nz[k]:
            sig = _sigmoid(a[k])
            # u_hat = u + g w,  g = (m(a) - a)/n2,  c = m(a)
            wbar += g[k] * uhat_bar
            gbar = np.dot(uhat_bar, params.w[k])
            abar = cbar * sig + gbar * (sig - 1.0) / n2[k]
            n2bar = -gbar * (m[k] - a[k]) / n2[k] ** 2
            wbar += abar * params.u_raw[k] + 2.0 * n2bar * params.w[k]
            ubar += abar * params.w[k]
        else:
            # w = 0: u_hat = u_raw and c = w.u_raw
            wbar += cbar * params.u_raw[k]
            ubar += cbar * params.w[k]
        gw[k] = wbar
        gu[k] = ubar
        ybar = xbar
    inv = 1.0 / trace.count
    return FlowParams(gw * inv, gu * inv, gb * inv)
