"""ReLU network psi_lambda: R^d -> R used as the dual potential.

Only the input gradient of psi matters to the solver.  For a ReLU net that
gradient is the product W_1 D_1 W_2 D_2 ... D_{L-1} W_L of weight matrices
and 0/1 activation masks, so it is piecewise constant in x and polynomial in
the weights.  Biases only move the mask boundaries; the inner loss therefore
has zero gradient with respect to them.

Weights are stored as (fan_in, fan_out) matrices so a batch X of shape (K, d)
maps as X @ W + b.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import Rng

DEFAULT_WIDTHS = (20, 20, 20, 20, 20)
FORMAT_HEADER = "wassflow-psi v1"


@dataclass
class PsiParams:
    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(w, dtype=float)) for w in self.weights]
        self.biases = [np.atleast_1d(np.asarray(b, dtype=float)) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: bias shape {b.shape} vs weight {w.shape}")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError(f"layer {k}: width mismatch")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("last layer must map to a scalar")

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.dim] + [w.shape[1] for w in self.weights]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "PsiParams":
        return PsiParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, flat, widths) -> "PsiParams":
        flat = np.asarray(flat, dtype=float)
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(flat[pos : pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise ValueError("flat vector length does not match widths")
        return cls(weights, biases)

    def to_text(self) -> str:
        lines = [FORMAT_HEADER, " ".join(str(n) for n in self.widths)]
        lines += [" ".join(f"{v:.17g}" for v in self.flatten())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PsiParams":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != FORMAT_HEADER:
            raise ValueError(f"expected header {FORMAT_HEADER!r}")
        widths = [int(t) for t in lines[1].split()]
        flat = [float(t) for ln in lines[2:] for t in ln.split()]
        return cls.from_flat(flat, widths)


def init_psi(dim: int, rng: Rng, hidden=DEFAULT_WIDTHS, bias_std: float = 1.0) -> PsiParams:
    """He-scaled Gaussian weights; biases N(0, bias_std^2).

    Biases must not all be zero: with zero biases psi is positively
    homogeneous and its gradient is constant along rays from the origin,
    and the inner loss can never move them away from zero.
    """
    widths = [dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(rng.normal(fan_out) * bias_std if fan_out > 1 else np.zeros(1))
    return PsiParams(weights, biases)


def _check_dim(lam: PsiParams, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != lam.dim:
        raise ValueError(f"dimension mismatch: psi takes d={lam.dim}, got {x.shape[1]}")
    return x, single


def _masks(lam: PsiParams, x):
    """Forward sweep in column layout: activations are (width, K)."""
    masks = []
    h = x.T
    for w, b in zip(lam.weights[:-1], lam.biases[:-1]):
        z = w.T @ h
        z += b[:, None]
        m = z > 0.0
        masks.append(m)
        np.multiply(z, m, out=z)
        h = z
    return masks, h


def psi_forward(lam: PsiParams, x):
    x, single = _check_dim(lam, x)
    _, h = _masks(lam, x)
    out = (lam.weights[-1].T @ h)[0] + lam.biases[-1][0]
    return out[0] if single else out


def _grad_chain(lam: PsiParams, masks, count):
    """Backward sweep for d psi / dx; returns (width, K) gradients w.r.t. every pre-activation."""
    n_layers = len(lam.weights)
    gz = [None] * n_layers
    gz[-1] = np.ones((1, count))
    if n_layers == 1:
        return gz
    # the output layer has a single unit, so its backward matmul is an outer product
    g = masks[-1] * lam.weights[-1]
    gz[-2] = g
    for k in range(n_layers - 2, 0, -1):
        g = lam.weights[k] @ g
        g *= masks[k - 1]
        gz[k - 1] = g
    return gz


def psi_input_grad(lam: PsiParams, x):
    """Exact grad_x psi; the ReLU derivative at 0 is taken as 0."""
    x, single = _check_dim(lam, x)
    masks, _ = _masks(lam, x)
    gz = _grad_chain(lam, masks, x.shape[0])
    g = (lam.weights[0] @ gz[0]).T
    return g[0] if single else g


def _check_counts(target, eval_points):
    target = np.asarray(target, dtype=float)
    eval_points = np.asarray(eval_points, dtype=float)
    if target.shape[0] != eval_points.shape[0] or target.shape != eval_points.shape:
        raise ValueError("target and eval_points must have matching counts and dims")
    return target, eval_points


def inner_loss(lam: PsiParams, target, eval_points) -> float:
    """mean_i |grad psi(y_i) - v_i|^2."""
    target, eval_points = _check_counts(target, eval_points)
    r = psi_input_grad(lam, eval_points) - target
    return float(np.mean(np.sum(r * r, axis=1)))


def inner_loss_and_grad(lam: PsiParams, target, eval_points):
    """Inner loss and its gradient with respect to every weight and bias."""
    target, y = _check_counts(target, eval_points)
    y, _ = _check_dim(lam, y)
    count = y.shape[0]
    masks, _ = _masks(lam, y)
    gz = _grad_chain(lam, masks, count)
    r = lam.weights[0] @ gz[0]
    r -= target.T
    loss = float(np.einsum("ij,ij->", r, r)) / count

    # reverse sweep through nabla = W_0 gz[0], gz[k] = (W_{k+1} gz[k+1]) * mask_k
    n_layers = len(lam.weights)
    wbar = [None] * n_layers
    rbar = r
    rbar *= 2.0 / count
    wbar[0] = rbar @ gz[0].T
    gbar = lam.weights[0].T @ rbar
    for k in range(n_layers - 1):
        abar = gbar
        abar *= masks[k]
        if k + 2 == n_layers:
            wbar[k + 1] = abar.sum(axis=1)[:, None]
            break
        wbar[k + 1] = abar @ gz[k + 1].T
        gbar = lam.weights[k + 1].T @ abar
    bbar = [np.zeros_like(b) for b in lam.biases]
    return loss, PsiParams(wbar, bbar)


def inner_loss_grad_lambda(lam: PsiParams, target, eval_points) -> PsiParams:
    return inner_loss_and_grad(lam, target, eval_points)[1]
