import csv
import json

import numpy as np
import pytest

from trumpetflow import cli
from trumpetflow.model import load_checkpoint
from trumpetflow.settings import RunConfig
from trumpetflow.training import TrainConfig
from trumpetflow.verify import SuiteResult

TINY_TORUS = """SCHEMA_VERSION=1
PROBLEM=torus
SEED=1
G_BLOCKS=1
H_BLOCKS=1
HIDDEN_WIDTH=8
COND_WIDTH=4
EPOCHS_MSE=1
EPOCHS_ML=1
BATCH_SIZE=32
NUM_SAMPLES=64
NUM_TEST=8
K_SAMPLES=3
"""

TINY_INPAINT = """SCHEMA_VERSION=1
PROBLEM=grf-inpaint
SEED=2
GRID_SIDE=8
PATCH_SIZE=4
LATENT_DIM=4
G_BLOCKS=1
H_BLOCKS=1
H_MODE=fvc
SKIP_CONNECTIONS=true
HIDDEN_WIDTH=8
COND_WIDTH=4
EPOCHS_MSE=1
EPOCHS_ML=1
BATCH_SIZE=16
NUM_SAMPLES=32
NUM_TEST=2
K_SAMPLES=3
"""


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture
def torus_run(tmp_path):
    config = tmp_path / "torus.env"
    config.write_text(TINY_TORUS)
    out = tmp_path / "torus"
    args = ["--config", str(config), "--out", str(out)]
    assert cli.main(["generate", *args]) == cli.EXIT_OK
    return out, args


@pytest.fixture
def inpaint_run(tmp_path):
    config = tmp_path / "inpaint.env"
    config.write_text(TINY_INPAINT)
    out = tmp_path / "inpaint"
    args = ["--config", str(config), "--out", str(out)]
    assert cli.main(["generate", *args]) == cli.EXIT_OK
    return out, args


# --- generate --------------------------------------------------------------

def test_generate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        code = cli.main(["generate", "--problem", "torus", "--quick", "--seed", "5", "--out", str(tmp_path / name)])
        assert code == cli.EXIT_OK
    for filename in (cli.TRAIN_FILE, cli.TEST_FILE):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 5
    assert manifest["train_shape"] == {"x": [2560, 3], "y": [2560, 1]}


def test_generate_csv_export(torus_run, tmp_path):
    out, args = torus_run
    assert cli.main(["generate", *args, "--csv"]) == cli.EXIT_OK
    rows = read_rows(out / "train.csv")
    assert rows[0] == ["x0", "x1", "x2", "y0"]
    assert len(rows) == 65


def test_unknown_problem_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["generate", "--problem", "mnist", "--out", str(tmp_path)])
    assert info.value.code == cli.EXIT_USAGE


def test_bad_config_files_exit_with_usage_code(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "missing.env"), "--out", str(tmp_path)]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.env"
    bad.write_text("SCHEMA_VERSION=1\nK_SAMPLES=1\n")
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_image_grid_smaller_than_the_ssim_window_is_rejected_up_front(tmp_path):
    small = tmp_path / "small.env"
    small.write_text(TINY_INPAINT.replace("GRID_SIDE=8", "GRID_SIDE=6").replace("PATCH_SIZE=4", "PATCH_SIZE=2"))
    assert cli.main(["generate", "--config", str(small), "--out", str(tmp_path / "small")]) == cli.EXIT_USAGE
    assert not (tmp_path / "small" / cli.TRAIN_FILE).exists()


# --- train / evaluate / map ------------------------------------------------

def test_torus_pipeline(torus_run):
    out, args = torus_run
    assert cli.main(["train", *args]) == cli.EXIT_OK
    assert (out / cli.CHECKPOINT_FILE).is_file()
    assert len(read_rows(out / cli.METRICS_FILE)) == 1 + 2 * 2

    assert cli.main(["evaluate", *args]) == cli.EXIT_OK
    report = dict(read_rows(out / cli.REPORT_FILE)[1:])
    assert 0.0 <= float(report["within_tolerance_fraction"]) <= 1.0
    assert {"mean_distance", "ks_max", "ks_z0", "ks_z1"} <= set(report)
    samples = read_rows(out / cli.FIBER_SAMPLES_FILE)
    assert samples[0] == ["angle_deg", "sample", "x", "y", "z"]
    assert len(samples) == 1 + (360 // cli.FIBER_STEP_DEG) * 3

    # the torus model uses standard couplings, so there is no surrogate MAP
    assert cli.main(["map", *args]) == cli.EXIT_USAGE


def test_resume_of_a_finished_run_changes_nothing(torus_run):
    out, args = torus_run
    assert cli.main(["train", *args]) == cli.EXIT_OK
    before, _, _ = load_checkpoint(out / cli.CHECKPOINT_FILE)
    assert cli.main(["train", *args, "--resume"]) == cli.EXIT_OK
    after, _, _ = load_checkpoint(out / cli.CHECKPOINT_FILE)
    for a, b in zip(before.parameters(), after.parameters()):
        assert np.array_equal(a.value, b.value), a.name


def test_training_twice_writes_byte_identical_checkpoints(torus_run):
    out, args = torus_run
    assert cli.main(["train", *args]) == cli.EXIT_OK
    first = (out / cli.CHECKPOINT_FILE).read_bytes()
    assert cli.main(["train", *args]) == cli.EXIT_OK
    assert (out / cli.CHECKPOINT_FILE).read_bytes() == first


def test_resume_without_checkpoint(torus_run):
    _, args = torus_run
    assert cli.main(["train", *args, "--resume"]) == cli.EXIT_USAGE


def test_dataset_problem_mismatch(torus_run, tmp_path):
    out, _ = torus_run
    code = cli.main(["train", "--problem", "mobius", "--dataset", str(out / cli.TRAIN_FILE), "--out", str(tmp_path)])
    assert code == cli.EXIT_USAGE


def test_divergence_exits_with_code_2(torus_run, monkeypatch):
    out, args = torus_run
    monkeypatch.setattr(RunConfig, "train_config",
                        lambda self: TrainConfig(epochs_mse=1, epochs_ml=1, divergence_limit=1e-30))
    assert cli.main(["train", *args]) == cli.EXIT_DIVERGED
    assert not (out / cli.CHECKPOINT_FILE).exists()
    assert (out / "checkpoint.diverged.ckpt").is_file()


def test_inpainting_pipeline(inpaint_run):
    out, args = inpaint_run
    assert cli.main(["train", *args]) == cli.EXIT_OK
    assert cli.main(["evaluate", *args]) == cli.EXIT_OK

    rows = read_rows(out / cli.REPORT_FILE)
    assert rows[0] == cli.IMAGE_REPORT_COLUMNS + cli.ORACLE_REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert all(value != "" for row in rows[1:] for value in row)
    assert len(read_rows(out / "items" / "item_000_samples.csv")) == 1 + 3
    assert len(read_rows(out / "items" / "item_001_estimates.csv")) == 1 + 64

    assert cli.main(["map", *args]) == cli.EXIT_OK
    estimates = read_rows(out / cli.MAP_FILE)
    assert estimates[0][:3] == ["item", "snr", "p0"]
    assert len(estimates) == 3
    assert len(estimates[1]) == 2 + 64


def test_evaluate_with_missing_checkpoint(inpaint_run):
    _, args = inpaint_run
    assert cli.main(["evaluate", *args]) == cli.EXIT_USAGE


# --- verify ----------------------------------------------------------------

def test_verify_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_all", lambda seed: [SuiteResult("roundtrip", passed=4)])
    assert cli.main(["verify"]) == cli.EXIT_OK

    failing = SuiteResult("logdet", passed=3, failed=1, messages=["coupling dim 2: analytic 0.1 vs Jacobian 0.2"])
    monkeypatch.setattr(cli, "run_all", lambda seed: [SuiteResult("roundtrip", passed=4), failing])
    assert cli.main(["verify", "--seed", "3"]) == cli.EXIT_VERIFY_FAILED
    assert "logdet" in capsys.readouterr().out
