import json

import numpy as np
import pytest

from wassflow.cli import ConfigError, main, parse_config, read_samples_csv, write_samples_csv


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = main([*args, "--out", str(out)])
    return code, out


def test_default_batch_sizes():
    cfg, _, _ = parse_config(None, {"dim": "2"})
    assert cfg.k_in == cfg.k_out == 1000
    cfg, _, _ = parse_config(None, {"dim": "10"})
    assert cfg.k_in == 3000
    assert cfg.flow_length == 60 and cfg.alpha_out == 0.005 and cfg.alpha_in == 0.0005 and cfg.eps == 0.005


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("dt = 0.01\nsteps = 3  # comment\nflow_length = 4\n")
    cfg, _, _ = parse_config(path, {"dt": "0.005"})
    assert cfg.h == 0.005 and cfg.n_steps == 3 and cfg.flow_length == 4


def test_unknown_and_invalid_keys(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("stepz = 3\n")
    with pytest.raises(ConfigError, match="stepz"):
        parse_config(path)
    with pytest.raises(ConfigError, match="steps: expected an integer >= 0"):
        parse_config(None, {"steps": "-2"})
    with pytest.raises(ConfigError, match="dt"):
        parse_config(None, {"dt": "fast"})


def test_config_error_writes_record(tmp_path):
    code, out = run(tmp_path, "solve", "--steps", "-1")
    assert code == 2
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "ConfigError" and "steps" in err["message"]


def test_gradcheck_subcommand(tmp_path):
    code, out = run(tmp_path, "gradcheck", "--instances", "6")
    assert code == 0
    rep = json.loads((out / "gradcheck.json").read_text())
    assert rep["passed"] and max(rep["entropy"], rep["outer_objective"], rep["inner_loss"]) <= 1e-4


SMALL = ["--dim", "2", "--mu", "3,3", "--sigma", "0.25,0.25", "--flow-length", "3", "--m-out", "2",
         "--m-in", "2", "--k-out", "50", "--k-in", "50", "--eval-samples", "40", "--seed", "5"]


def test_solve_zero_steps(tmp_path):
    code, out = run(tmp_path, "solve", *SMALL, "--steps", "0")
    assert code == 0
    stats = json.loads((out / "stats.json").read_text())
    assert len(stats) == 1 and stats[0]["t"] == 0.0
    assert sorted(p.name for p in out.glob("samples_t*.csv")) == ["samples_t0.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "solve" and manifest["seed"] == 5
    assert manifest["solver_config"]["k_in"] == 50
    assert manifest["potential"]["mu"] == [3.0, 3.0]


def test_solve_outputs_and_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("WASSFLOW_THREADS", "1")
    args = ["solve", *SMALL, "--steps", "4", "--snapshot-stride", "2", "--plane", "0-1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "stats.json").read_bytes() == (b / "stats.json").read_bytes()
    stats = json.loads((a / "stats.json").read_text())
    assert [r["step"] for r in stats] == [0, 2, 4]
    assert {"t", "mean", "cov", "entropy", "ref_mean_err", "ref_cov_err", "gaussian_w2_to_exact"} <= set(stats[0])
    lines = (a / "samples_t4.csv").read_text().splitlines()
    assert lines[0] == "x0,x1" and len(lines) == 41
    dens = (a / "density_t2_p0-1.csv").read_text().splitlines()
    assert "silverman" in dens[0] and "grid 64x64" in dens[1] and len(dens) == 3 + 64 * 64
    assert (a / "flow_final.txt").exists() and (a / "psi_final.txt").exists()


def test_plane_naming_high_dim(tmp_path):
    code, out = run(tmp_path, "flat-solve", "--dim", "10", "--potential", "rosenbrock", "--flow-length", "2",
                    "--steps", "0", "--eval-samples", "30", "--k-out", "20", "--plane", "4-5", "--plane", "8-9")
    assert code == 0
    assert (out / "density_t0_p4-5.csv").exists() and (out / "density_t0_p8-9.csv").exists()
    code, _ = run(tmp_path, "solve", "--dim", "3", "--plane", "2-3")
    assert code == 2


def test_samples_csv_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 3)) * 1e3
    write_samples_csv(tmp_path / "s.csv", x)
    assert np.array_equal(read_samples_csv(tmp_path / "s.csv"), x)


def test_exact_affine_subcommand(tmp_path):
    code, out = run(tmp_path, "exact-affine", "--mu", "3,3", "--sigma", "1,0.25", "--dt", "0.1", "--steps", "14")
    assert code == 0
    rows = (out / "exact_affine.csv").read_text().splitlines()
    assert rows[0] == "t,gaussian_w2_to_exact" and len(rows) == 16
    assert max(float(r.split(",")[1]) for r in rows[1:]) <= 1e-6


def test_diagnose_delta1(tmp_path, capsys):
    code, out = run(tmp_path, "diagnose-delta1", "--potential", "styblinski_tang", "--dim", "1", "--theta", "1,0")
    assert code == 0
    rec = json.loads((out / "delta1.json").read_text())
    assert rec["residual"] == pytest.approx(0.3456, abs=1e-9)
    assert "0.3456" in capsys.readouterr().out


def test_solve_1d(tmp_path):
    code, out = run(tmp_path, "solve-1d", "--dim", "1", "--mu", "0", "--sigma", "1", "--theta", "2,1",
                    "--dt", "0.01", "--steps", "100", "--snapshot-stride", "50")
    assert code == 0
    stats = json.loads((out / "stats.json").read_text())
    assert [r["step"] for r in stats] == [0, 50, 100]
    assert stats[-1]["gaussian_w2_to_exact"] < 0.01 and stats[-1]["delta1"] <= 1e-9
    assert len((out / "trajectory.csv").read_text().splitlines()) == 102


def test_solve_1d_needs_dim_one(tmp_path):
    code, out = run(tmp_path, "solve-1d", "--dim", "2")
    assert code == 2 and (out / "error.json").exists()


def test_baseline_em(tmp_path):
    code, out = run(tmp_path, "baseline-em", "--potential", "styblinski_tang", "--dim", "1", "--steps", "4",
                    "--snapshot-stride", "2", "--eval-samples", "100")
    assert code == 0
    assert [r["step"] for r in json.loads((out / "stats.json").read_text())] == [0, 2, 4]
    assert len((out / "samples_t4.csv").read_text().splitlines()) == 101


def test_divergence_is_reported(tmp_path):
    code, out = run(tmp_path, "flat-solve", "--potential", "styblinski_tang", "--dim", "1", "--dt", "50",
                    "--steps", "5", "--flow-length", "2", "--k-out", "50", "--eval-samples", "50")
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert err["subcommand"] == "flat-solve" and err["error"]
