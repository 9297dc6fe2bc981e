"""Semi-implicit saddle-point time stepper for the parametric Fokker-Planck ODE.

Each time step freezes theta_0 = theta_k and alternates

* inner loop: fit grad psi_lambda at y = T_{theta_0}(X) to the rescaled
  displacement (T_theta(X) - T_{theta_0}(X)) / eps,
* outer loop: one optimizer step on
  mean[2 grad psi_lambda(T_{theta_0} X) . T_theta X + (2h/eps)(V(T_theta X) + beta log rho_theta(T_theta X))],

drawing a fresh reference batch for every single optimizer step.  The flat
baseline replaces all of this by theta <- theta - h grad_theta H.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow as flowmod
from .flow import FlowParams, flow_vjp_theta, pushforward_logdensity
from .numkit import Rng, empirical_mean_cov, sample_std_gaussian
from .optim import AdamState, adam_step, sgd_step
from .psinet import DEFAULT_WIDTHS, PsiParams, init_psi, inner_loss, inner_loss_and_grad, psi_input_grad
from .reference import GaussianState, gaussian_w2, ou_exact
from .potential import Quadratic

log = logging.getLogger(__name__)


class SolverDivergence(RuntimeError):
    pass


def default_batch_size(dim: int) -> int:
    return max(1000, 300 * dim)


def m_out_heuristic(h: float, alpha_out: float, factor: float = 20.0) -> int:
    """Outer iteration count proportional to h / alpha_out."""
    return max(1, int(round(factor * h / alpha_out)))


@dataclass(frozen=True)
class SolverConfig:
    h: float = 0.005
    n_steps: int = 140
    m_out: int = 20
    m_in: int = 100
    k_out: int | None = None
    k_in: int | None = None
    alpha_out: float = 0.005
    alpha_in: float = 0.0005
    eps_rescale: float | None = None
    seed: int = 0
    snapshot_stride: int = 1
    flow_length: int = 60
    psi_widths: tuple = DEFAULT_WIDTHS
    eval_samples: int = 6000
    optimizer: str = "adam"
    warm_start_psi: bool = True
    w_init_scale: float = 1.0
    b_init_scale: float = 1.0
    psi_bias_std: float = 1.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        for name in ("n_steps", "m_out", "m_in"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("k_out", "k_in"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.alpha_out <= 0 or self.alpha_in <= 0:
            raise ValueError("learning rates must be positive")
        if self.eps_rescale is not None and self.eps_rescale <= 0:
            raise ValueError("eps_rescale must be positive")
        if self.snapshot_stride < 1 or self.flow_length < 1 or self.eval_samples < 2:
            raise ValueError("snapshot_stride, flow_length >= 1 and eval_samples >= 2 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def resolved(self, dim: int) -> "SolverConfig":
        """Fill batch sizes max(1000, 300 d) and eps = alpha_out where unset."""
        return replace(
            self,
            k_out=self.k_out or default_batch_size(dim),
            k_in=self.k_in or default_batch_size(dim),
            eps_rescale=self.eps_rescale or self.alpha_out,
            psi_widths=tuple(self.psi_widths),
        )

    @property
    def eps(self) -> float:
        return self.eps_rescale if self.eps_rescale is not None else self.alpha_out


@dataclass
class Snapshot:
    step: int
    t: float
    theta: FlowParams
    entropy: float
    entropy_stderr: float
    mean: np.ndarray
    cov: np.ndarray
    samples: np.ndarray = field(repr=False)


@dataclass
class RunResult:
    snapshots: list
    psi: PsiParams | None
    config: SolverConfig

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    def diagnostics(self, potential) -> list[dict]:
        return [snapshot_stats(s, potential) for s in self.snapshots]


@dataclass
class SchemeState:
    """Everything that evolves from one time step to the next."""

    theta: FlowParams
    psi: PsiParams
    adam_theta: AdamState
    adam_psi: AdamState


def _step_params(cfg: SolverConfig, state: AdamState, flat, grad, lr):
    if cfg.optimizer == "sgd":
        return sgd_step(flat, grad, lr), state
    return adam_step(state, flat, grad, lr)


def outer_objective(theta: FlowParams, theta0: FlowParams, lam: PsiParams, batch,
                    h: float, eps: float, potential) -> float:
    y0, _, _ = flowmod.flow_forward(theta0, batch)
    y, logdet, _ = flowmod.flow_forward(theta, batch)
    gpsi = psi_input_grad(lam, y0)
    ent = potential.value(y) + potential.beta * pushforward_logdensity(theta, batch, logdet)
    return float(np.mean(2.0 * np.sum(gpsi * y, axis=1) + (2.0 * h / eps) * ent))


def outer_objective_grad(theta: FlowParams, theta0: FlowParams, lam: PsiParams, batch,
                         h: float, eps: float, potential) -> FlowParams:
    """Gradient in theta of :func:`outer_objective` (psi and theta0 held fixed)."""
    batch = np.asarray(batch, dtype=float)
    if theta.dim != theta0.dim or theta.dim != lam.dim or batch.shape[1] != theta.dim:
        raise ValueError("dimension mismatch between flows, psi and batch")
    y0, _, _ = flowmod.flow_forward(theta0, batch)
    y, _, trace = flowmod.flow_forward(theta, batch, record=True)
    scale = 2.0 * h / eps
    out_cot = 2.0 * psi_input_grad(lam, y0) + scale * potential.grad(y)
    logdet_cot = np.full(batch.shape[0], -scale * potential.beta)
    return flow_vjp_theta(theta, trace, out_cot, logdet_cot)


def entropy_grad(theta: FlowParams, potential, batch) -> FlowParams:
    """Gradient of the Monte-Carlo entropy estimate on a fixed batch."""
    y, _, trace = flowmod.flow_forward(theta, batch, record=True)
    return flow_vjp_theta(theta, trace, potential.grad(y), np.full(y.shape[0], -potential.beta))


def inner_fit(state: SchemeState, theta0: FlowParams, cfg: SolverConfig, rng: Rng) -> float:
    """M_in optimizer steps on the inner least-squares problem; returns the last loss."""
    loss = float("nan")
    dim, widths = theta0.dim, state.psi.widths
    for _ in range(cfg.m_in):
        x = sample_std_gaussian(rng, dim, cfg.k_in)
        y0, _, _ = flowmod.flow_forward(theta0, x, with_logdet=False)
        y, _, _ = flowmod.flow_forward(state.theta, x, with_logdet=False)
        loss, g = inner_loss_and_grad(state.psi, (y - y0) / cfg.eps, y0)
        flat, state.adam_psi = _step_params(cfg, state.adam_psi, state.psi.flatten(), g.flatten(), cfg.alpha_in)
        state.psi = PsiParams.from_flat(flat, widths)
    return loss


def time_step(state: SchemeState, cfg: SolverConfig, rng: Rng, potential) -> SchemeState:
    """Advance one time step h; ``state`` is updated in place and returned."""
    theta0 = state.theta.copy()
    dim = theta0.dim
    for _ in range(cfg.m_out):
        inner_fit(state, theta0, cfg, rng)
        x = sample_std_gaussian(rng, dim, cfg.k_out)
        g = outer_objective_grad(state.theta, theta0, state.psi, x, cfg.h, cfg.eps, potential)
        flat, state.adam_theta = _step_params(cfg, state.adam_theta, state.theta.flatten(), g.flatten(), cfg.alpha_out)
        state.theta = FlowParams.from_flat(flat, dim)
    if not np.all(np.isfinite(state.theta.flatten())):
        raise SolverDivergence("flow parameters became non-finite")
    return state


def _snapshot(step: int, t: float, theta: FlowParams, potential, eval_batch) -> Snapshot:
    y, logdet, _ = flowmod.flow_forward(theta, eval_batch)
    ent = potential.value(y) + potential.beta * pushforward_logdensity(theta, eval_batch, logdet)
    mean, cov = empirical_mean_cov(y)
    return Snapshot(step, t, theta.copy(), float(np.mean(ent)),
                    float(np.std(ent, ddof=1) / np.sqrt(ent.size)), mean, cov, y)


class _Recorder:
    def __init__(self, cfg, potential, eval_batch):
        self.cfg, self.potential, self.eval_batch = cfg, potential, eval_batch
        self.snapshots = []
        self.h0 = None

    def __call__(self, step, theta):
        snap = _snapshot(step, step * self.cfg.h, theta, self.potential, self.eval_batch)
        if self.h0 is None:
            self.h0 = snap.entropy
        if not np.isfinite(snap.entropy) or abs(snap.entropy - self.h0) > 1e3:
            raise SolverDivergence(
                f"entropy estimate {snap.entropy:.6g} at t={snap.t:.6g} left the "
                f"admissible band around its initial value {self.h0:.6g}"
            )
        self.snapshots.append(snap)


def _streams(seed: int):
    """Independent streams: training draws, initialization, evaluation batch."""
    return Rng(seed).spawn(3)


def initial_state(dim: int, cfg: SolverConfig, init_rng: Rng, theta_init: FlowParams | None = None) -> SchemeState:
    theta = theta_init.copy() if theta_init is not None else FlowParams.identity(
        dim, cfg.flow_length, init_rng, cfg.w_init_scale, cfg.b_init_scale)
    psi = init_psi(dim, init_rng, cfg.psi_widths, cfg.psi_bias_std)
    return SchemeState(theta, psi, AdamState.zeros(theta.size), AdamState.zeros(psi.size))


def solve(theta_init: FlowParams | None, cfg: SolverConfig, potential, progress=None) -> RunResult:
    """Run N time steps of the scheme, snapshotting every ``snapshot_stride`` steps.

    ``theta_init=None`` starts from a randomly oriented identity flow of
    length ``cfg.flow_length``.  ``progress`` is an optional callable invoked
    as progress(step, snapshot_or_None).
    """
    dim = potential.dim
    cfg = cfg.resolved(dim)
    if theta_init is not None and theta_init.dim != dim:
        raise ValueError("theta_init dimension does not match the potential")
    train_rng, init_rng, eval_rng = _streams(cfg.seed)
    state = initial_state(dim, cfg, init_rng, theta_init)
    record = _Recorder(cfg, potential, sample_std_gaussian(eval_rng, dim, cfg.eval_samples))
    record(0, state.theta)
    for k in range(1, cfg.n_steps + 1):
        if not cfg.warm_start_psi:
            state.psi = init_psi(dim, init_rng, cfg.psi_widths, cfg.psi_bias_std)
            state.adam_psi = AdamState.zeros(state.psi.size)
        time_step(state, cfg, train_rng, potential)
        snap = None
        if k % cfg.snapshot_stride == 0:
            record(k, state.theta)
            snap = record.snapshots[-1]
            log.info("step %d t=%.4f H=%.5f", k, snap.t, snap.entropy)
        if progress is not None:
            progress(k, snap)
    return RunResult(record.snapshots, state.psi, cfg)


def flat_gradient_solve(theta_init: FlowParams | None, cfg: SolverConfig, potential, progress=None) -> RunResult:
    """Forward Euler on the flat gradient flow theta' = -grad_theta H(theta)."""
    dim = potential.dim
    cfg = cfg.resolved(dim)
    train_rng, init_rng, eval_rng = _streams(cfg.seed)
    theta = theta_init.copy() if theta_init is not None else FlowParams.identity(
        dim, cfg.flow_length, init_rng, cfg.w_init_scale, cfg.b_init_scale)
    record = _Recorder(cfg, potential, sample_std_gaussian(eval_rng, dim, cfg.eval_samples))
    record(0, theta)
    for k in range(1, cfg.n_steps + 1):
        x = sample_std_gaussian(train_rng, dim, cfg.k_out)
        g = entropy_grad(theta, potential, x)
        theta = FlowParams.from_flat(sgd_step(theta.flatten(), g.flatten(), cfg.h), dim)
        if not np.all(np.isfinite(theta.flatten())):
            raise SolverDivergence("flow parameters became non-finite")
        snap = None
        if k % cfg.snapshot_stride == 0:
            record(k, theta)
            snap = record.snapshots[-1]
        if progress is not None:
            progress(k, snap)
    return RunResult(record.snapshots, None, cfg)


def snapshot_stats(snap: Snapshot, potential, init: GaussianState | None = None) -> dict:
    """Statistics row for one snapshot, with exact-solution errors for quadratic V."""
    row = {
        "step": snap.step,
        "t": snap.t,
        "mean": snap.mean.tolist(),
        "cov": snap.cov.tolist(),
        "entropy": snap.entropy,
        "entropy_stderr": snap.entropy_stderr,
    }
    if isinstance(potential, Quadratic):
        d = potential.dim
        init = init or GaussianState(np.zeros(d), np.eye(d))
        exact = ou_exact(potential, init, snap.t)
        row["ref_mean"] = exact.mean.tolist()
        row["ref_cov"] = exact.cov.tolist()
        row["ref_mean_err"] = float(np.linalg.norm(snap.mean - exact.mean))
        row["ref_cov_err"] = float(np.linalg.norm(snap.cov - exact.cov))
        row["gaussian_w2_to_exact"] = gaussian_w2(GaussianState(snap.mean, snap.cov), exact)
    return row


def _rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / den) if den > 0 else 0.0


def _central_diff(fn, flat, step):
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        out[i] = (fn(up) - fn(dn)) / (2.0 * step)
    return out


def _random_flow(rng: Rng, dim: int, length: int) -> FlowParams:
    return FlowParams(rng.normal((length, dim)), rng.normal((length, dim)), 0.5 * rng.normal(length))


def _kink_margin(lam: PsiParams, y) -> float:
    """Smallest |pre-activation| of psi on the batch."""
    h, low = y.T, np.inf
    for w, b in zip(lam.weights[:-1], lam.biases[:-1]):
        z = w.T @ h + b[:, None]
        low = min(low, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return low


def gradcheck_suite(n_instances: int = 50, seed: int = 0, step: float = 1e-5,
                    max_dim: int = 3, batch: int = 16) -> dict:
    """Compare hand-written gradients with central differences on random instances.

    Covers grad_theta of the entropy estimate, grad_theta of the outer
    objective and grad_lambda of the inner loss.  Each entry of the result is
    the largest relative error ||g - g_fd|| / max(||g||, ||g_fd||) seen over
    the instances.  Inner-loss instances whose ReLU pre-activations come
    within 1e-3 of zero are redrawn, since a central difference straddling a
    kink does not estimate the derivative.
    """
    from .potential import Quadratic, Rosenbrock, StyblinskiTang

    rng = Rng(seed)
    worst = {"entropy": 0.0, "outer_objective": 0.0, "inner_loss": 0.0}
    redrawn = 0
    for i in range(n_instances):
        dim = 1 + i % max_dim
        length = 1 + i % 3
        mu = rng.normal(dim)
        sigma = np.diag(0.5 + np.abs(rng.normal(dim)))
        potential = [
            Quadratic(mu, sigma, beta=0.5 + (i % 4) * 0.5),
            StyblinskiTang(dim, beta=1.0),
            Rosenbrock(dim, beta=1.0) if dim > 1 else Quadratic(mu, sigma),
        ][i % 3]
        theta = _random_flow(rng, dim, length)
        theta0 = _random_flow(rng, dim, length)
        x = rng.normal((batch, dim))

        def ent(flat):
            return flowmod.entropy_estimate(FlowParams.from_flat(flat, dim), potential, x)

        g = entropy_grad(theta, potential, x).flatten()
        worst["entropy"] = max(worst["entropy"], _rel_err(g, _central_diff(ent, theta.flatten(), step)))

        lam = init_psi(dim, rng, hidden=(6, 6))
        h, eps = 0.01 * (1 + i % 5), 0.005 * (1 + i % 2)

        def outer(flat):
            return outer_objective(FlowParams.from_flat(flat, dim), theta0, lam, x, h, eps, potential)

        g = outer_objective_grad(theta, theta0, lam, x, h, eps, potential).flatten()
        worst["outer_objective"] = max(worst["outer_objective"],
                                       _rel_err(g, _central_diff(outer, theta.flatten(), step)))

        y = x
        while _kink_margin(lam, y) < 1e-3:
            redrawn += 1
            y = rng.normal((batch, dim))
        target = rng.normal((batch, dim))
        widths = lam.widths

        def inner(flat):
            return inner_loss(PsiParams.from_flat(flat, widths), target, y)

        g = inner_loss_and_grad(lam, target, y)[1].flatten()
        worst["inner_loss"] = max(worst["inner_loss"], _rel_err(g, _central_diff(inner, lam.flatten(), step)))
    worst["instances"] = n_instances
    worst["redrawn_batches"] = redrawn
    return worst
