"""Command-line front end: config parsing, run orchestration and output files.

Every run writes ``manifest.json`` into the output directory before any
computation, then subcommand-specific outputs.  Failures leave an
``error.json`` record and a nonzero exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import oned, reference, scheme
from .flow import FlowParams
from .numkit import Rng, empirical_mean_cov, sample_std_gaussian
from .potential import Quadratic, make_potential

log = logging.getLogger("wassflow")

SUBCOMMANDS = ("solve", "solve-1d", "flat-solve", "baseline-em", "exact-affine", "diagnose-delta1", "gradcheck")


class ConfigError(ValueError):
    pass


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def _planes(text):
    if isinstance(text, list):
        return text
    out = []
    for part in str(text).replace(",", " ").split():
        i, _, j = part.partition("-")
        out.append((int(i), int(j)))
    return out


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


# key: (parser, default, check, expected-range text)
_pos = (lambda v: v > 0, "a positive number")
_nonneg = (lambda v: v >= 0, "an integer >= 0")
_posint = (lambda v: v >= 1, "an integer >= 1")
_any = (lambda v: True, "")
OPTIONS = {
    "potential": (str, "quadratic", *_any),
    "dim": (int, 2, *_posint),
    "beta": (float, 1.0, *_pos),
    "mu": (_float_list, None, *_any),
    "sigma": (_float_list, None, *_any),
    "scale": (float, None, *_pos),
    "curvature": (float, None, *_pos),
    "dt": (float, 0.005, *_pos),
    "steps": (int, 140, *_nonneg),
    "flow_length": (int, 60, *_posint),
    "m_out": (int, 20, *_nonneg),
    "m_in": (int, 100, *_nonneg),
    "k_out": (int, None, *_posint),
    "k_in": (int, None, *_posint),
    "lr_out": (float, 0.005, *_pos),
    "lr_in": (float, 0.0005, *_pos),
    "eps_rescale": (float, None, *_pos),
    "seed": (int, 0, lambda v: 0 <= v < 2**64, "an integer in [0, 2^64)"),
    "snapshot_stride": (int, 1, *_posint),
    "eval_samples": (int, 6000, lambda v: v >= 2, "an integer >= 2"),
    "plane": (_planes, [], *_any),
    "out": (str, "wassflow-out", *_any),
    "family": (str, "affine", lambda v: v in ("affine", "planar"), "'affine' or 'planar'"),
    "theta": (_float_list, None, *_any),
    "quad_order": (int, 100, *_posint),
    "rk4_step": (float, 1e-4, *_pos),
    "instances": (int, 50, *_posint),
    "warm_start_psi": (_bool, True, *_any),
    "save_samples": (_bool, True, *_any),
    "kde_grid": (int, 64, lambda v: v >= 2, "an integer >= 2"),
}


def _coerce(key, raw):
    parse, _, check, expected = OPTIONS[key]
    try:
        value = parse(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {raw!r} for {key}" + (f": expected {expected}" if expected else ""))
    if value is not None and not isinstance(value, list) and not check(value):
        raise ConfigError(f"invalid value {raw!r} for {key}: expected {expected}")
    return value


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        if key not in OPTIONS:
            raise ConfigError(f"unknown configuration key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def parse_config(config_path=None, flags: dict | None = None):
    """Merge defaults, config file and flags (flags win).

    Returns ``(SolverConfig, potential, options)`` where ``options`` holds
    every resolved key.
    """
    opts = {k: v[1] for k, v in OPTIONS.items()}
    if config_path:
        opts.update(read_config_file(config_path))
    for key, raw in (flags or {}).items():
        if key not in OPTIONS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if raw is not None:
            opts[key] = _coerce(key, raw)
    dim = opts["dim"]
    params = {}
    if opts["mu"] is not None:
        params["mu"] = np.array(opts["mu"])
    if opts["sigma"] is not None:
        sigma = np.array(opts["sigma"])
        if sigma.size == dim * dim and dim > 1:
            sigma = sigma.reshape(dim, dim)
        elif sigma.size != dim:
            raise ConfigError(f"invalid value for sigma: expected {dim} diagonal entries or a {dim}x{dim} matrix")
        params["sigma"] = sigma
    for key in ("scale", "curvature"):
        if opts[key] is not None:
            params[key] = opts[key]
    try:
        potential = make_potential(opts["potential"], dim, opts["beta"], **params)
        cfg = scheme.SolverConfig(
            h=opts["dt"], n_steps=opts["steps"], m_out=opts["m_out"], m_in=opts["m_in"],
            k_out=opts["k_out"], k_in=opts["k_in"], alpha_out=opts["lr_out"], alpha_in=opts["lr_in"],
            eps_rescale=opts["eps_rescale"], seed=opts["seed"], snapshot_stride=opts["snapshot_stride"],
            flow_length=opts["flow_length"], eval_samples=opts["eval_samples"],
            warm_start_psi=opts["warm_start_psi"],
        ).resolved(dim)
    except (ValueError, np.linalg.LinAlgError) as err:
        raise ConfigError(str(err))
    for i, j in opts["plane"]:
        if not (0 <= i < dim and 0 <= j < dim and i != j):
            raise ConfigError(f"invalid value for plane: {i}-{j} needs two distinct coordinates below {dim}")
    return cfg, potential, opts


def _potential_record(potential) -> dict:
    rec = {"name": potential.name, "dim": potential.dim, "beta": potential.beta}
    if isinstance(potential, Quadratic):
        rec["mu"] = potential.mu.tolist()
        rec["sigma"] = potential.sigma.tolist()
    else:
        rec["scale"] = potential.scale
        if hasattr(potential, "curvature"):
            rec["curvature"] = potential.curvature
    return rec


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(type(obj).__name__)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, default=_json_default) + "\n")


def write_samples_csv(path: Path, samples):
    samples = np.atleast_2d(samples)
    header = ",".join(f"x{i}" for i in range(samples.shape[1]))
    np.savetxt(path, samples, fmt="%.17g", delimiter=",", header=header, comments="")


def read_samples_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))


def write_density_grid(path: Path, samples, plane, n_grid: int = 64):
    """Gaussian KDE (Silverman bandwidth) of the projection onto ``plane``."""
    from scipy.stats import gaussian_kde

    i, j = plane
    pts = samples[:, [i, j]].T
    kde = gaussian_kde(pts, bw_method="silverman")
    bw = np.sqrt(np.diag(kde.covariance))
    lo = pts.min(axis=1) - 3.0 * bw
    hi = pts.max(axis=1) + 3.0 * bw
    gx, gy = np.linspace(lo[0], hi[0], n_grid), np.linspace(lo[1], hi[1], n_grid)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    dens = kde(np.vstack([xx.ravel(), yy.ravel()]))
    with open(path, "w") as fh:
        fh.write(f"# plane {i}-{j}; kernel gaussian; bandwidth silverman factor {kde.factor:.17g}; "
                 f"kernel std {bw[0]:.17g} {bw[1]:.17g}\n")
        fh.write(f"# grid {n_grid}x{n_grid}; x{i} in [{lo[0]:.17g}, {hi[0]:.17g}]; "
                 f"x{j} in [{lo[1]:.17g}, {hi[1]:.17g}]\n")
        fh.write(f"x{i},x{j},density\n")
        np.savetxt(fh, np.column_stack([xx.ravel(), yy.ravel(), dens]), fmt="%.17g", delimiter=",")


def write_outputs(result: scheme.RunResult, potential, out: Path, opts: dict):
    """Per-snapshot sample CSVs, optional density grids, stats.json and final parameters."""
    for snap in result.snapshots:
        if opts.get("save_samples", True):
            write_samples_csv(out / f"samples_t{snap.step}.csv", snap.samples)
        for plane in opts.get("plane", []):
            write_density_grid(out / f"density_t{snap.step}_p{plane[0]}-{plane[1]}.csv",
                               snap.samples, plane, opts.get("kde_grid", 64))
    _write_json(out / "stats.json", result.diagnostics(potential))
    (out / "flow_final.txt").write_text(result.snapshots[-1].theta.to_text())
    if result.psi is not None:
        (out / "psi_final.txt").write_text(result.psi.to_text())


def _cloud_stats(step, t, samples, potential):
    mean, cov = empirical_mean_cov(samples)
    row = {"step": step, "t": t, "mean": mean.tolist(), "cov": cov.tolist()}
    if isinstance(potential, Quadratic):
        d = potential.dim
        exact = reference.ou_exact(potential, reference.GaussianState(np.zeros(d), np.eye(d)), t)
        row["ref_mean_err"] = float(np.linalg.norm(mean - exact.mean))
        row["ref_cov_err"] = float(np.linalg.norm(cov - exact.cov))
        row["gaussian_w2_to_exact"] = reference.gaussian_w2(reference.GaussianState(mean, cov), exact)
    return row


def run_baseline_em(cfg, potential, opts, out: Path) -> dict:
    noise_rng, init_rng, _ = scheme._streams(cfg.seed)
    x = sample_std_gaussian(init_rng, potential.dim, cfg.eval_samples)
    rows = [_cloud_stats(0, 0.0, x, potential)]
    if opts["save_samples"]:
        write_samples_csv(out / "samples_t0.csv", x)
    for k in range(1, cfg.n_steps + 1):
        x = reference.euler_maruyama(potential, x, cfg.h, 1, noise_rng)
        if k % cfg.snapshot_stride == 0:
            rows.append(_cloud_stats(k, k * cfg.h, x, potential))
            if opts["save_samples"]:
                write_samples_csv(out / f"samples_t{k}.csv", x)
    _write_json(out / "stats.json", rows)
    return {"snapshots": len(rows)}


def run_exact_affine(cfg, potential, opts, out: Path) -> dict:
    if not isinstance(potential, Quadratic):
        raise ConfigError("exact-affine needs the quadratic potential")
    d = potential.dim
    state = reference.AffineState(np.eye(d), np.zeros(d), 0.0)
    init = reference.GaussianState(np.zeros(d), np.eye(d))
    rows = []
    for k in range(0, cfg.n_steps + 1, cfg.snapshot_stride):
        t = k * cfg.h
        if t > state.t:
            state = reference.affine_flow_ode_solve(potential, state, t, rk4_h=opts["rk4_step"])[-1]
        push = state.pushforward()
        exact = reference.ou_exact(potential, init, t)
        rows.append({
            "step": k, "t": t, "b": state.b.tolist(), "gamma": state.gamma.tolist(),
            "mean": push.mean.tolist(), "cov": push.cov.tolist(),
            "gaussian_w2_to_exact": reference.gaussian_w2(push, exact),
        })
    _write_json(out / "stats.json", rows)
    with open(out / "exact_affine.csv", "w") as fh:
        fh.write("t,gaussian_w2_to_exact\n")
        for r in rows:
            fh.write(f"{r['t']:.17g},{r['gaussian_w2_to_exact']:.17g}\n")
    return {"max_w2_to_exact": max(r["gaussian_w2_to_exact"] for r in rows)}


def _flow_1d(opts, potential):
    if potential.dim != 1:
        raise ConfigError("one-dimensional subcommands need dim = 1")
    theta = opts["theta"]
    if opts["family"] == "affine":
        theta = [1.0, 0.0] if theta is None else theta
        if len(theta) != 2 or theta[0] <= 0:
            raise ConfigError("invalid value for theta: affine family needs theta1 > 0, theta2")
        return oned.Affine(*theta)
    if theta is None:
        rng = Rng(opts["seed"])
        k = opts["flow_length"]
        flow = FlowParams(rng.normal((k, 1)), 0.5 * rng.normal((k, 1)), 0.5 * rng.normal(k))
        return oned.Planar1D(flow)
    if len(theta) % 3:
        raise ConfigError("invalid value for theta: planar family needs (w, u_raw, b) per layer")
    return oned.Planar1D(FlowParams.from_flat(theta, 1))


def run_solve_1d(cfg, potential, opts, out: Path) -> dict:
    flow0 = _flow_1d(opts, potential)
    quad = oned.Quadrature(opts["quad_order"])
    traj = oned.forward_euler_solve_1d(flow0, potential, cfg.h, cfg.n_steps, quad)
    exact_ok = isinstance(flow0, oned.Affine) and isinstance(potential, Quadratic)
    rows = []
    with open(out / "trajectory.csv", "w") as fh:
        fh.write("step,t," + ",".join(f"theta{i}" for i in range(flow0.params.size)) + "\n")
        for k, f in enumerate(traj):
            fh.write(f"{k},{k * cfg.h:.17g}," + ",".join(f"{v:.17g}" for v in f.params) + "\n")
            if k % cfg.snapshot_stride:
                continue
            mean, var = oned.pushforward_moments_1d(f, quad)
            fisher, grad_term = oned.delta1_terms(f, potential, quad)
            row = {"step": k, "t": k * cfg.h, "theta": f.params.tolist(), "mean": mean, "var": var,
                   "entropy": oned.entropy_1d(f, potential, quad), "delta1": max(0.0, fisher - grad_term)}
            if exact_ok:
                ex = oned.affine_quadratic_exact_1d(flow0, potential, k * cfg.h)
                row["gaussian_w2_to_exact"] = float(np.hypot(f.theta1 - ex.theta1, f.theta2 - ex.theta2))
            rows.append(row)
    _write_json(out / "stats.json", rows)
    return {"snapshots": len(rows)}


def run_delta1(cfg, potential, opts, out: Path) -> dict:
    flow = _flow_1d(opts, potential)
    fisher, grad_term = oned.delta1_terms(flow, potential, oned.Quadrature(opts["quad_order"]))
    rec = {"fisher_term": fisher, "gradient_term": grad_term, "residual": max(0.0, fisher - grad_term)}
    _write_json(out / "delta1.json", rec)
    print(f"{rec['residual']:.17g}")
    return rec


def run_gradcheck(cfg, potential, opts, out: Path) -> dict:
    rep = scheme.gradcheck_suite(n_instances=opts["instances"], seed=opts["seed"])
    rep["tolerance"] = 1e-4
    rep["passed"] = all(rep[k] <= 1e-4 for k in ("entropy", "outer_objective", "inner_loss"))
    _write_json(out / "gradcheck.json", rep)
    for k in ("entropy", "outer_objective", "inner_loss"):
        print(f"{k:16s} max relative error {rep[k]:.3e}")
    return rep


def run_scheme(cfg, potential, opts, out: Path, flat: bool = False) -> dict:
    solver = scheme.flat_gradient_solve if flat else scheme.solve

    def progress(k, snap):
        if snap is not None:
            log.info("step %d/%d t=%.4f H=%.6g", k, cfg.n_steps, snap.t, snap.entropy)

    result = solver(None, cfg, potential, progress=progress)
    write_outputs(result, potential, out, opts)
    return {"snapshots": len(result.snapshots)}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wassflow", description="Fokker-Planck solver on normalizing-flow parameters.")
    ap.add_argument("--version", action="version", version=f"wassflow {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in OPTIONS:
            flag = "--" + key.replace("_", "-")
            if key == "plane":
                p.add_argument(flag, action="append", metavar="I-J")
            else:
                p.add_argument(flag, metavar=key.upper())
    return ap


RUNNERS = {
    "solve": run_scheme,
    "flat-solve": lambda *a: run_scheme(*a, flat=True),
    "solve-1d": run_solve_1d,
    "baseline-em": run_baseline_em,
    "exact-affine": run_exact_affine,
    "diagnose-delta1": run_delta1,
    "gradcheck": run_gradcheck,
}


def _thread_limit():
    """Honour WASSFLOW_THREADS by capping BLAS threads."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("WASSFLOW_THREADS")
    if raw is None:
        return threadpool_limits(limits=None), None
    n = int(raw)
    if n < 1:
        raise ConfigError("WASSFLOW_THREADS must be >= 1")
    return threadpool_limits(limits=n), n


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    flags = {k: getattr(args, k) for k in OPTIONS}
    if flags["plane"] is not None:
        flags["plane"] = " ".join(flags["plane"])
    out = Path(flags["out"] or OPTIONS["out"][1])
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg, potential, opts = parse_config(args.config, flags)
        limiter, threads = _thread_limit()
        manifest = {
            "subcommand": args.subcommand,
            "config_path": args.config,
            "options": opts,
            "solver_config": asdict(cfg),
            "potential": _potential_record(potential),
            "output_dir": str(out),
            "version": __version__,
            "seed": cfg.seed,
            "threads": threads,
        }
        _write_json(out / "manifest.json", manifest)
        started = time.time()
        with limiter:
            summary = RUNNERS[args.subcommand](cfg, potential, opts, out)
        _write_json(out / "timing.json", {"seconds": time.time() - started})
    except Exception as err:  # every failure leaves a machine-readable record
        kind = type(err).__name__
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", {"error": kind, "message": str(err), "subcommand": args.subcommand})
        except OSError:
            pass
        print(f"wassflow {args.subcommand}: {kind}: {err}", file=sys.stderr)
        return 2 if isinstance(err, ConfigError) else 1
    if args.subcommand == "gradcheck" and not summary["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
