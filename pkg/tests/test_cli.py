import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from multiscale_hinf.cli import main, write_artifacts
from multiscale_hinf.pnm import read_pnm, write_pnm

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def smooth_image(side, channels=None, seed=0):
    r, c = np.mgrid[0:side, 0:side] / side
    base = 0.5 + 0.3 * np.sin(6 * r) * np.cos(4 * c)
    if channels:
        base = np.stack([base, base[::-1], base.T][:channels], axis=-1)
    noise = np.random.default_rng(seed).uniform(-0.05, 0.05, base.shape)
    return (np.clip(base + noise, 0, 1) * 255).astype(np.uint8)


def write_config(path, **items):
    lines = []
    for k, v in items.items():
        lines.append(f"{k} = {json.dumps(v)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}


def test_step1d_rows_and_determinism(tmp_path):
    args = ["step1d", "--output", str(tmp_path / "a"), "--gamma", "1", "--seed", "4"]
    assert main(args) == 0
    rows = read_rows(tmp_path / "a" / "metrics.csv")
    assert [r["level"] for r in rows] == [str(k) for k in range(6)]
    assert main(["step1d", "--output", str(tmp_path / "b"), "--gamma", "1", "--seed", "4"]) == 0
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
    assert main(["step1d", "--output", str(tmp_path / "c"), "--gamma", "1", "--seed", "5"]) == 0
    assert snapshot(tmp_path / "a")["metrics.csv"] != snapshot(tmp_path / "c")["metrics.csv"]


def test_manifest_lists_every_file(tmp_path):
    out = tmp_path / "run"
    assert main(["step1d", "--output", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    listed = manifest["files"]
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(listed) == on_disk
    for name, meta in listed.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == meta["sha256"]
    assert manifest["seed"] == 0
    for name in ("predictor_hinf", "current_hinf"):
        rec = manifest["feasibility"][name]
        assert rec["feasible"] and rec["gamma_mode"] == "auto"
        assert rec["gamma"] == pytest.approx(0.9 * rec["max_gamma"])
        assert "bound_holds" in manifest["game_objective"][name]


def test_estimate_dump_has_bounds(tmp_path):
    out = tmp_path / "run"
    assert main(["step1d", "--output", str(out), "--filter", "kalman"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["estimates_kalman.csv", "manifest.json", "metrics.csv"]
    rows = read_rows(out / "estimates_kalman.csv")
    assert len(rows) == 63
    for r in rows:
        assert float(r["lower70_1"]) <= float(r["xhat_1"]) <= float(r["upper70_1"])
    assert read_rows(out / "metrics.csv")[0]["snr_hinf_db"] == ""


def test_image2d_gamma_185(tmp_path, capsys):
    write_pnm(tmp_path / "img.pgm", smooth_image(256))
    cfg = write_config(tmp_path / "c.toml", scenario="image2d", image="img.pgm", gamma=185.44, process_var=0.01, measurement_var=0.02)
    out = tmp_path / "out"
    assert main(["image2d", "--config", str(cfg), "--output", str(out)]) == 3
    err = capsys.readouterr().err
    assert "first failing node (1,1) at stage 1" in err
    assert not out.exists()
    assert not list(tmp_path.glob(".out.staging-*"))
    cfg = write_config(tmp_path / "c.toml", scenario="image2d", image="img.pgm", gamma=185.44, q_weight=0.25)
    assert main(["image2d", "--config", str(cfg), "--output", str(out)]) == 0
    for name in ("predictor_hinf", "current_hinf", "kalman"):
        assert read_pnm(out / f"restored_{name}.pgm").shape == (256, 256)
    rows = read_rows(out / "metrics.csv")
    assert len(rows) == 9
    # near its bound the predictor form is far worse than the current-measurement form
    assert float(rows[-1]["snr_hinf_db"]) > 10


def test_image2d_rgb(tmp_path):
    write_pnm(tmp_path / "img.ppm", smooth_image(32, channels=3))
    cfg = write_config(tmp_path / "c.toml", scenario="image2d", image="img.ppm", filter="current_hinf")
    out = tmp_path / "out"
    assert main(["image2d", "--config", str(cfg), "--output", str(out)]) == 0
    assert read_pnm(out / "restored_current_hinf.ppm").shape == (32, 32, 3)
    assert (out / "estimates_current_hinf_c2.csv").exists()


def test_image2d_rejects_bad_image(tmp_path, capsys):
    write_pnm(tmp_path / "img.pgm", np.zeros((8, 16), dtype=np.uint8))
    cfg = write_config(tmp_path / "c.toml", scenario="image2d", image="img.pgm")
    assert main(["image2d", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "power-of-two" in capsys.readouterr().err
    (tmp_path / "img.pgm").write_bytes(b"P2\n1 1\n255\n0")
    assert main(["image2d", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2


def test_missing_stage_bump(tmp_path):
    out = tmp_path / "out"
    assert main(["missing_stage", "--config", str(CONFIGS / "missing_stage.toml"), "--output", str(out)]) == 0
    rows = read_rows(out / "covariance.csv")
    assert len(rows) == 7
    for name in ("current_hinf", "kalman"):
        assert float(rows[4][f"cov_trace_{name}_missing"]) > float(rows[4][f"cov_trace_{name}_full"])
    # the predictor form sees the gap one stage later
    assert float(rows[5]["cov_trace_predictor_hinf_missing"]) > float(rows[5]["cov_trace_predictor_hinf_full"])
    assert json.loads((out / "manifest.json").read_text())["missing_stages"] == [4]


def test_missing_stage_out_of_range(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", scenario="missing_stage", missing_stages=[9])
    assert main(["missing_stage", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "outside levels" in capsys.readouterr().err


def test_gamma_sweep_flip_and_limit(tmp_path):
    out = tmp_path / "out"
    assert main(["gamma_sweep", "--config", str(CONFIGS / "gamma_sweep.toml"), "--output", str(out)]) == 0
    rows = read_rows(out / "gamma_sweep.csv")
    pred = [r for r in rows if r["kind"] == "grid" and r["filter"] == "predictor_hinf"]
    flags = [r["feasible"] == "true" for r in pred]
    assert sum(a != b for a, b in zip(flags, flags[1:])) == 1
    below = [float(r["gamma"]) for r in pred if r["feasible"] == "true"]
    above = [float(r["gamma"]) for r in pred if r["feasible"] == "false"]
    assert max(below) < 2.0 < min(above)
    gmax = [r for r in rows if r["kind"] == "max_gamma" and r["filter"] == "predictor_hinf"][0]
    assert abs(float(gmax["gamma"]) - 2.0) < 1e-4

    cfg = write_config(tmp_path / "c.toml", scenario="gamma_sweep", gamma_grid=[1e-6])
    assert main(["gamma_sweep", "--config", str(cfg), "--output", str(tmp_path / "l")]) == 0
    rows = read_rows(tmp_path / "l" / "gamma_sweep.csv")
    cur = [r for r in rows if r["kind"] == "grid" and r["filter"] == "current_hinf"][0]
    ref = [r for r in rows if r["kind"] == "reference"][0]
    assert cur["feasible"] == "true"
    assert float(cur["total_cost"]) == pytest.approx(float(ref["total_cost"]), rel=1e-5)


def test_gamma_sweep_duplicates_and_empty(tmp_path, caplog):
    cfg = write_config(tmp_path / "c.toml", scenario="gamma_sweep", gamma_grid=[1.0, 1.0, 2.0])
    with caplog.at_level(logging.WARNING):
        assert main(["gamma_sweep", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 0
    assert any("duplicate gamma" in r.message for r in caplog.records)
    grid = [r for r in read_rows(tmp_path / "o" / "gamma_sweep.csv") if r["kind"] == "grid"]
    assert len(grid) == 4
    cfg = write_config(tmp_path / "e.toml", scenario="gamma_sweep", gamma_grid=[])
    assert main(["gamma_sweep", "--config", str(cfg), "--output", str(tmp_path / "e")]) == 2
    assert not (tmp_path / "e").exists()


def test_steady_state(tmp_path):
    out = tmp_path / "out"
    assert main(["steady_state", "--output", str(out)]) == 0
    rows = read_rows(out / "steady_state.csv")
    assert len(rows) == 31
    summary = json.loads((out / "manifest.json").read_text())["steady_state"]
    for name in ("predictor_hinf", "current_hinf", "kalman"):
        assert summary[name]["last_change"] < 1e-6


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", scenario="step1d", gama=1.0)
    assert main(["step1d", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "gama" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_explicit_infeasible_gamma(tmp_path, capsys):
    assert main(["step1d", "--gamma", "500", "--output", str(tmp_path / "o")]) == 3
    assert "stage" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_no_partial_writes(tmp_path):
    out = tmp_path / "o"
    with pytest.raises(TypeError):
        write_artifacts({"a.csv": b"1\n", "b.csv": None}, out)
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "multiscale_hinf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "step1d" in res.stdout
