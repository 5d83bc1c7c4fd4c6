import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from groco import cli as gcli
from groco import dataio as dio
from groco import diffgrad as dg

SRC = str(Path(__file__).resolve().parent.parent / "src")


def run_cli(*args, env_extra=None, cwd=None):
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC + os.pathsep + env.get("PYTHONPATH", "")
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "groco.cli", *args],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
    )


def test_sort_hard_example():
    proc = run_cli("sort", "--values", "6,1,4,2", "--hard")
    assert proc.returncode == 0
    lines = proc.stdout.strip().splitlines()
    assert lines[0].split() == ["1", "2", "4", "6"]
    matrix = [line.split() for line in lines[1:]]
    assert len(matrix) == 4
    flat = [v for row in matrix for v in row]
    assert set(flat) == {"0", "1"}


def test_sort_relaxed_two_values():
    proc = run_cli("sort", "--values", "2,1", "--beta", "1")
    assert proc.returncode == 0
    lines = proc.stdout.strip().splitlines()
    assert [float(v) for v in lines[0].split()] == pytest.approx([1.25, 1.75], abs=1e-9)
    assert [float(v) for v in lines[1].split()] == pytest.approx([0.25, 0.75], abs=1e-9)
    assert [float(v) for v in lines[2].split()] == pytest.approx([0.75, 0.25], abs=1e-9)


def test_sort_unparsable_values_is_usage_error():
    proc = run_cli("sort", "--values", "abc")
    assert proc.returncode == 2
    assert "usage" in proc.stderr.lower() or "error" in proc.stderr.lower()


def test_help_lists_defaults():
    proc = run_cli("train", "--help")
    assert proc.returncode == 0
    assert "default: 1.0" in proc.stdout  # --beta
    assert "default: 10" in proc.stdout  # --neg
    assert "--no-stopgrad" in proc.stdout
    assert "--no-preorder" in proc.stdout


def test_train_missing_data_is_usage_error(tmp_path):
    proc = run_cli("train", cwd=tmp_path)
    assert proc.returncode == 2
    assert "no training data" in proc.stderr


def _small_train_args(tmp_path, seed="5", extra=()):
    return [
        "train", "--synth", "--clusters", "3", "--dim", "8", "--per-cluster", "16",
        "--epochs", "2", "--batch-size", "8", "--neg", "4", "--seed", seed,
        "--ckpt", str(tmp_path / "model.ckpt"),
        "--metrics", str(tmp_path / "metrics.csv"),
        "--save-data", str(tmp_path / "data.gvec"),
        *extra,
    ]


def test_train_writes_outputs_and_is_deterministic(tmp_path):
    proc = run_cli(*_small_train_args(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    ckpt1 = (tmp_path / "model.ckpt").read_bytes()
    metrics1 = (tmp_path / "metrics.csv").read_bytes()
    assert len(metrics1.splitlines()) == 1 + 2 * (48 // 8)

    proc = run_cli(*_small_train_args(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "model.ckpt").read_bytes() == ckpt1
    assert (tmp_path / "metrics.csv").read_bytes() == metrics1

    proc = run_cli(*_small_train_args(tmp_path, seed="6"), cwd=tmp_path)
    assert (tmp_path / "model.ckpt").read_bytes() != ckpt1


def test_train_baselines_complete(tmp_path):
    for loss in ("infonce", "triplet"):
        proc = run_cli(*_small_train_args(tmp_path, extra=["--loss", loss]), cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr


def test_train_ablation_flags_accepted(tmp_path):
    proc = run_cli(
        *_small_train_args(tmp_path, extra=["--no-stopgrad", "--no-preorder", "--random-negatives"]),
        cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr


def test_train_dump_config(tmp_path):
    proc = run_cli(*_small_train_args(tmp_path, extra=["--dump-config"]), cwd=tmp_path)
    assert proc.returncode == 0
    lines = proc.stdout.splitlines()
    assert any(line == "beta=1.0" for line in lines)
    assert any(line == "num_negatives=4" for line in lines)
    assert any(line.startswith("seed=5") for line in lines)


def test_groco_seed_env_override(tmp_path):
    args = [
        "train", "--synth", "--clusters", "3", "--dim", "8", "--per-cluster", "16",
        "--epochs", "1", "--batch-size", "8", "--neg", "4", "--warmup-epochs", "0",
        "--ckpt", str(tmp_path / "a.ckpt"), "--metrics", str(tmp_path / "a.csv"),
        "--dump-config",
    ]
    proc = run_cli(*args, env_extra={"GROCO_SEED": "77"}, cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert "seed=77" in proc.stdout.splitlines()


def test_eval_knn_and_linear(tmp_path):
    proc = run_cli(*_small_train_args(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    proc = run_cli(
        "eval", "--ckpt", str(tmp_path / "model.ckpt"), "--data", str(tmp_path / "data.gvec"),
        "--mode", "knn", "--k", "1,3", "--out", str(tmp_path / "report.csv"), "--seed", "1",
        cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    out = proc.stdout
    assert "knn k=1" in out and "knn k=3" in out
    for line in out.strip().splitlines():
        acc = float(line.rsplit("=", 1)[1])
        assert 0.0 <= acc <= 1.0
    report = (tmp_path / "report.csv").read_text().splitlines()
    assert report[0] == "metric,k,accuracy"

    proc = run_cli(
        "eval", "--ckpt", str(tmp_path / "model.ckpt"), "--data", str(tmp_path / "data.gvec"),
        "--mode", "linear", "--probe-steps", "50", "--seed", "1",
        cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    assert "linear_probe" in proc.stdout


def test_eval_random_init_checkpoint(tmp_path):
    import groco.model as md

    ds = dio.synth_generate(dio.SynthConfig(clusters=3, dim=8, per_cluster=16, seed=2))
    dio.gvec_write(ds, tmp_path / "data.gvec")
    params = md.init_params(8, (8, 8), (4, 4), seed=0)
    md.checkpoint_save(params, md.init_optimizer(params), tmp_path / "rand.ckpt")
    proc = run_cli(
        "eval", "--ckpt", str(tmp_path / "rand.ckpt"), "--data", str(tmp_path / "data.gvec"),
        "--k", "1,3", "--seed", "1", cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    for line in proc.stdout.strip().splitlines():
        acc = float(line.rsplit("=", 1)[1])
        assert 0.0 <= acc <= 1.0


def test_eval_both_spaces_run(tmp_path):
    proc = run_cli(*_small_train_args(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    for space in ("representation", "projection"):
        proc = run_cli(
            "eval", "--ckpt", str(tmp_path / "model.ckpt"), "--data", str(tmp_path / "data.gvec"),
            "--space", space, "--k", "1", "--seed", "1", cwd=tmp_path,
        )
        assert proc.returncode == 0, proc.stderr


def test_eval_shape_mismatch_is_usage_error(tmp_path):
    proc = run_cli(*_small_train_args(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    other = dio.synth_generate(dio.SynthConfig(clusters=2, dim=5, per_cluster=10, seed=1))
    dio.gvec_write(other, tmp_path / "other.gvec")
    proc = run_cli(
        "eval", "--ckpt", str(tmp_path / "model.ckpt"), "--data", str(tmp_path / "other.gvec"),
        "--seed", "1", cwd=tmp_path,
    )
    assert proc.returncode == 2


def test_toy_csv_outputs(tmp_path):
    out_g = tmp_path / "toy_groco.csv"
    out_i = tmp_path / "toy_nce.csv"
    assert run_cli("toy", "--loss", "groco", "--steps", "40", "--out", str(out_g), cwd=tmp_path).returncode == 0
    assert run_cli("toy", "--loss", "infonce", "--steps", "40", "--out", str(out_i), cwd=tmp_path).returncode == 0
    lines_g = out_g.read_text().strip().splitlines()
    lines_i = out_i.read_text().strip().splitlines()
    assert lines_g[0] == "step,s_pos,s_neg1,s_neg2,s_neg3,s_neg4"
    assert len(lines_g) == len(lines_i) == 42


def test_toy_zero_lr_constant_columns(tmp_path):
    out = tmp_path / "toy.csv"
    assert run_cli("toy", "--lr", "0", "--steps", "10", "--out", str(out), cwd=tmp_path).returncode == 0
    rows = [line.split(",")[1:] for line in out.read_text().strip().splitlines()[1:]]
    assert all(row == rows[0] for row in rows)


def test_toy_default_grid_displacement_ordering(tmp_path):
    out_g = tmp_path / "g.csv"
    out_i = tmp_path / "i.csv"
    run_cli("toy", "--loss", "groco", "--out", str(out_g), cwd=tmp_path)
    run_cli("toy", "--loss", "infonce", "--out", str(out_i), cwd=tmp_path)

    def farthest_displacement(path):
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        far_col = 2 + int(np.argmin(data[0, 2:]))  # smallest initial negative similarity
        return abs(data[-1, far_col] - data[0, far_col])

    assert farthest_displacement(out_g) < farthest_displacement(out_i)


def test_gradcheck_passes_in_process(capsys):
    rc = gcli.main(["gradcheck", "--kmax", "2", "--nmax", "3", "--betas", "1", "--seed", "3"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "gradcheck pass" in out


def test_gradcheck_corrupted_vjp_fails(monkeypatch, capsys):
    monkeypatch.setitem(dg.VJP_RULES, "arctan", lambda node, g: (g * 0.5,))
    rc = gcli.main(["gradcheck", "--kmax", "1", "--nmax", "2", "--betas", "1", "--seed", "3"])
    out = capsys.readouterr().out
    assert rc == 1
    assert "FAIL" in out
    assert "coordinate" in out


def test_gradcheck_h_sweep_error_curve():
    # central-difference error: large h pays truncation, tiny h pays roundoff
    errors = {}
    for h in (1e-3, 1e-6, 1e-9):
        rng = np.random.default_rng(9)
        from groco import losses as ls

        point = gcli._separated_point(rng, 6)
        report = dg.grad_check(lambda t, x: ls.groco_from_raw_distances(x, 2, 1.0), point, h=h, tol=1.0)
        errors[h] = report.max_rel_error
    assert errors[1e-6] < errors[1e-3]
    assert errors[1e-6] < errors[1e-9]


def test_unknown_subcommand_exits_2():
    proc = run_cli("frobnicate")
    assert proc.returncode == 2


def test_nan_loss_exits_3_with_step(tmp_path, monkeypatch, capsys):
    import groco.batchpipe as bp
    import groco.model as md

    calls = {"n": 0}
    real = bp.batch_loss

    def poisoned(batch, loss_kind, params, **kw):
        out = real(batch, loss_kind, params, **kw)
        calls["n"] += 1
        if calls["n"] >= 3:  # diverge on the third step
            return dg.scale(out, float("nan"))
        return out

    monkeypatch.setattr(md.batchpipe, "batch_loss", poisoned)
    rc = gcli.main(_small_train_args(tmp_path, extra=["--warmup-epochs", "0"]))
    err = capsys.readouterr().err
    assert rc == 3
    assert "step 2" in err
