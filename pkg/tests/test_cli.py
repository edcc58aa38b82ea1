import json
import subprocess
import sys

import numpy as np
import pytest

from operon.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILURE, EXIT_OK, main
from operon.datagen import load_dataset
from operon.evaluate import read_columns

TINY = ["--model.p", "4", "--model.branch_hidden", "6", "--model.lift_hidden", "5",
        "--model.lstm_hidden", "5", "--model.decoder_hidden", "6", "--model.trunk_hidden", "6"]


def run(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pendulum_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pend")
    assert main(["generate", "--experiment", "pendulum", "--scale", "0.001", "--out", str(d / "data"),
                 "--threads", "1"]) == 0
    assert main(["train", "--dataset", str(d / "data" / "train.dataset"), "--out", str(d / "model.ck"),
                 "--epochs", "1", "--batch-size", "16", "--threads", "1"] + TINY) == 0
    return d


def test_generate_scale_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "generate", "--experiment", "lorenz", "--scale", "0.1", "--out",
                       tmp_path, "--no-test")
    assert code == EXIT_OK
    assert last_json(out)["quartets"] == 2000
    assert len(load_dataset(tmp_path / "train.dataset")) == 2000


def test_generate_full_scale_arithmetic():
    from operon.experiments import PRESETS
    p = PRESETS["lorenz"]
    assert p.n_train * p.replicas == 20000
    assert p.scaled(0.1).n_train * p.replicas == 2000


def test_generate_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "generate", "--experiment", "pendulum", "--scale", "0.001",
                   "--out", tmp_path / name, "--seed", "3", "--threads", "1")[0] == 0
    for rel in ("train.dataset", "manifest.json", "test/traj_00000.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OPERON_SEED", "11")
    run(capsys, "generate", "--experiment", "pendulum", "--scale", "0.001", "--out", tmp_path / "e",
        "--no-test")
    monkeypatch.delenv("OPERON_SEED")
    run(capsys, "generate", "--experiment", "pendulum", "--scale", "0.001", "--out", tmp_path / "f",
        "--no-test", "--seed", "11")
    run(capsys, "generate", "--experiment", "pendulum", "--scale", "0.001", "--out", tmp_path / "g",
        "--no-test")
    e = (tmp_path / "e" / "train.dataset").read_bytes()
    assert e == (tmp_path / "f" / "train.dataset").read_bytes()
    assert e != (tmp_path / "g" / "train.dataset").read_bytes()
    assert json.loads((tmp_path / "g" / "manifest.json").read_text())["seed"] == 0


def test_generate_noise_and_sin_test(tmp_path, capsys):
    code, out, _ = run(capsys, "generate", "--experiment", "pendulum", "--scale", "0.001", "--out",
                       tmp_path, "--noise", "0.05", "--test-control", "sin")
    assert code == 0
    assert last_json(out)["noise_fraction"] == 0.05
    from operon.dynamics import load_trajectory_csv
    tr = load_trajectory_csv(tmp_path / "test" / "traj_00000.csv")
    np.testing.assert_allclose(tr.inputs[:, 0], np.sin(tr.times / 2), atol=1e-12)


def test_train_writes_loadable_checkpoint(pendulum_dir, capsys):
    from operon.model import load_checkpoint
    ck = load_checkpoint(pendulum_dir / "model.ck")
    assert ck.config.p == 4
    assert (pendulum_dir / "model.ck.loss.csv").exists()
    code, out, _ = run(capsys, "inspect", pendulum_dir / "model.ck")
    assert code == 0 and last_json(out)["kind"] == "checkpoint"


def test_train_prints_final_loss(pendulum_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--dataset", pendulum_dir / "data" / "train.dataset", "--out",
                       tmp_path / "m.ck", "--max-iterations", "2", *TINY)
    assert code == 0
    assert "final training loss" in out
    assert last_json(out)["iterations"] == 2


def test_train_is_deterministic(pendulum_dir, tmp_path, capsys):
    args = ["train", "--dataset", pendulum_dir / "data" / "train.dataset", "--max-iterations", "3",
            "--threads", "1", *TINY]
    run(capsys, *args, "--out", tmp_path / "a.ck")
    run(capsys, *args, "--out", tmp_path / "b.ck")
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()
    assert (tmp_path / "a.ck.loss.csv").read_bytes() == (tmp_path / "b.ck.loss.csv").read_bytes()


def test_config_file_and_flag_precedence(pendulum_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.max_iterations": 4, "train.batch_size": 8, "model.p": 3,
                               "model.branch_hidden": [4], "model.lift_hidden": [4],
                               "model.lstm_hidden": 3, "model.decoder_hidden": [4],
                               "model.trunk_hidden": [4]}))
    code, out, _ = run(capsys, "train", "--config", cfg, "--dataset",
                       pendulum_dir / "data" / "train.dataset", "--out", tmp_path / "m.ck",
                       "--max-iterations", "2")
    assert code == 0
    assert last_json(out)["iterations"] == 2
    from operon.model import load_checkpoint
    assert load_checkpoint(tmp_path / "m.ck").config.p == 3


def test_sample_lists_members(pendulum_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "sample", "--dataset", pendulum_dir / "data" / "train.dataset",
                       "--init", pendulum_dir / "model.ck", "--out", tmp_path / "ens", "--M", "4",
                       "--burn_in", "4", "--thinning", "2", "--resgld.batch_size", "16",
                       "--resgld.swap_interval", "3")
    assert code == 0
    manifest = json.loads((tmp_path / "ens" / "manifest.json").read_text())
    assert len(manifest["members"]) == 4
    assert (tmp_path / "ens" / "energy_low.csv").exists()
    code, out, _ = run(capsys, "inspect", tmp_path / "ens")
    assert last_json(out)["members"] == 4


@pytest.fixture(scope="module")
def ensemble_dir(pendulum_dir):
    d = pendulum_dir / "ens"
    assert main(["sample", "--dataset", str(pendulum_dir / "data" / "train.dataset"), "--init",
                 str(pendulum_dir / "model.ck"), "--out", str(d), "--M", "3", "--burn_in", "2",
                 "--thinning", "1", "--resgld.batch_size", "16", "--threads", "1"]) == 0
    return d


def test_eval_oracle_is_zero(pendulum_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--oracle", "--experiment", "pendulum", "--test",
                       pendulum_dir / "data" / "test", "--out", tmp_path, "--replicas", "10")
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["mean"] == [0.0, 0.0]
    t = read_columns(tmp_path / "traj000_x0_true.txt")
    p = read_columns(tmp_path / "traj000_x0_pred.txt")
    assert t.shape[1] == 2
    np.testing.assert_array_equal(t, p)


def test_eval_checkpoint_files(pendulum_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", pendulum_dir / "model.ck", "--test",
                       pendulum_dir / "data" / "test", "--out", tmp_path, "--replicas", "5",
                       "--rollouts", "1")
    assert code == 0
    s = last_json(out)
    assert s["files"] == 4
    assert len(s["mean"]) == 2


def test_eval_ensemble_band_files(pendulum_dir, ensemble_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--ensemble", ensemble_dir, "--test",
                       pendulum_dir / "data" / "test", "--out", tmp_path, "--replicas", "5",
                       "--rollouts", "1")
    assert code == 0
    assert last_json(out)["picp"] is not None
    band = read_columns(tmp_path / "traj000_x0_band.txt")
    assert band.shape[1] == 3
    assert np.all(band[:, 1] <= band[:, 2])


def test_study_stepsize_25_points(pendulum_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "study", "--kind", "stepsize", "--oracle", "--experiment", "pendulum",
                       "--test", pendulum_dir / "data" / "test", "--h", "0.02:0.5:0.02",
                       "--replicas", "3", "--out", tmp_path)
    assert code == 0
    curve = read_columns(tmp_path / "stepsize_curve.txt")
    assert curve.shape == (25, 2)
    np.testing.assert_array_equal(curve[:, 1], 0.0)


def test_study_extrapolation(pendulum_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "study", "--kind", "extrapolation", "--checkpoint",
                       pendulum_dir / "model.ck", "--test", pendulum_dir / "data" / "test",
                       "--T", "2,4", "--out", tmp_path)
    assert code == 0
    assert read_columns(tmp_path / "extrapolation_curve.txt").shape == (2, 2)
    assert last_json(out)["mode"] == "rollout"


def test_study_is_byte_identical(pendulum_dir, tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "study", "--checkpoint", pendulum_dir / "model.ck", "--test",
            pendulum_dir / "data" / "test", "--h", "0.02,0.1", "--replicas", "4", "--out",
            tmp_path / name, "--threads", "1")
    for f in ("stepsize_curve.txt", "stepsize_report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ingest_synthetic_round_trip(tmp_path, capsys):
    csv = tmp_path / "pv.csv"
    assert run(capsys, "ingest", "--csv", csv, "--write-synthetic", "3:4")[0] == 0
    code, out, _ = run(capsys, "ingest", "--csv", csv, "--out", tmp_path / "pv", "--customers", "1:2",
                       "--dates", "2010-07-01:2010-07-02")
    assert code == 0
    s = last_json(out)
    assert s["records"] == 4 and s["skipped"] == 0
    files = sorted((tmp_path / "pv" / "trajectories").glob("*.csv"))
    assert len(files) == 4
    code, out, _ = run(capsys, "inspect", files[0])
    assert last_json(out)["n_points"] == 201


def test_inspect_dataset_and_experiment(pendulum_dir, capsys):
    code, out, _ = run(capsys, "inspect", pendulum_dir / "data" / "train.dataset")
    assert last_json(out)["kind"] == "dataset"
    code, out, _ = run(capsys, "inspect", pendulum_dir / "data")
    assert last_json(out)["kind"] == "experiment"


# ---------------------------------------------------------------------------
# failures

def test_missing_dataset_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", tmp_path / "nope", "--out", tmp_path / "m")
    assert code == EXIT_CONFIG
    e = json.loads(err.strip().splitlines()[-1])
    assert e["error"] == "config" and "does not exist" in e["message"]


def test_missing_required_option(capsys):
    code, _, err = run(capsys, "generate", "--experiment", "lorenz")
    assert code == EXIT_CONFIG
    assert "--out" in json.loads(err.strip().splitlines()[-1])["message"]


def test_eval_needs_one_model_source(pendulum_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--test", pendulum_dir / "data" / "test", "--out", tmp_path)
    assert code == EXIT_CONFIG
    code, _, _ = run(capsys, "eval", "--oracle", "--checkpoint", pendulum_dir / "model.ck", "--test",
                     pendulum_dir / "data" / "test", "--out", tmp_path)
    assert code == EXIT_CONFIG


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    code, _, _ = run(capsys, "generate", "--config", cfg, "--experiment", "lorenz", "--out", tmp_path)
    assert code == EXIT_CONFIG


def test_corrupt_dataset_is_failure(tmp_path, capsys):
    bad = tmp_path / "bad.dataset"
    bad.write_text('{"broken": ')
    code, _, err = run(capsys, "train", "--dataset", bad, "--out", tmp_path / "m")
    assert code == EXIT_FAILURE
    assert "error" in json.loads(err.strip().splitlines()[-1])


def test_training_divergence_exit_code(pendulum_dir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", pendulum_dir / "data" / "train.dataset", "--out",
                       tmp_path / "m.ck", "--lr", "1e250", "--lr-final", "1e250",
                       "--max-iterations", "50", *TINY)
    assert code == EXIT_DIVERGED
    assert json.loads(err.strip().splitlines()[-1])["error"] == "divergence"


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "operon.cli", "generate", "--experiment", "pv",
                          "--scale", "0.05", "--days", "2", "--out", str(tmp_path), "--no-test"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["quartets"] > 0
