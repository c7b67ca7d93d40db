import csv
import json
import subprocess
import sys

import pytest

from pseudolabel3d import experiment as ex
from pseudolabel3d.cli import main
from pseudolabel3d.detsim import NoiseModel, read_dataset


def write_config(tmp_path, **over):
    cfg = {"n_scenes": 6, "train_scenes": 6, "heldout_scenes": 3, "train": {"epochs": 1}, "out": str(tmp_path / "run")}
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def cfg_path(tmp_path):
    return write_config(tmp_path)


@pytest.fixture
def trained(cfg_path, tmp_path):
    assert run("gen", "--config", cfg_path) == 0
    assert run("train-votenet", "--config", cfg_path) == 0
    return cfg_path, tmp_path / "run"


def test_gen_writes_requested_counts(cfg_path, tmp_path):
    assert run("gen", "--config", cfg_path, "--scenes", 4) == 0
    assert len(read_dataset(tmp_path / "run" / "data" / "eval")) == 4
    assert len(read_dataset(tmp_path / "run" / "data" / "labeled")) == 9


def test_gen_is_byte_identical(tmp_path):
    a = write_config(tmp_path, out=str(tmp_path / "a"))
    assert run("gen", "--config", a) == 0
    b = write_config(tmp_path, out=str(tmp_path / "b"))
    assert run("gen", "--config", b) == 0
    files = sorted(f for f in (tmp_path / "a" / "data").rglob("*") if f.is_file())
    assert len(files) > 4
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_gen_refuses_existing_data(cfg_path, capsys):
    assert run("gen", "--config", cfg_path) == 0
    assert run("gen", "--config", cfg_path) == 2
    assert "--force" in capsys.readouterr().err
    assert run("gen", "--config", cfg_path, "--force") == 0


def test_missing_dataset_exit_code(cfg_path):
    assert run("train-votenet", "--config", cfg_path) == 3
    assert run("run", "--config", cfg_path, "--variant", "baseline") == 3


def test_missing_checkpoint_exit_code(cfg_path):
    assert run("gen", "--config", cfg_path) == 0
    assert run("run", "--config", cfg_path, "--variant", "ste-cbv") == 3


def test_missing_config_file(tmp_path):
    assert run("gen", "--config", tmp_path / "nope.json") == 3


@pytest.mark.parametrize(
    "over",
    [{"n_scenes": 0}, {"nms_iou": 1.5}, {"bogus": 1}, {"variant": "nope"}, {"noise": {"fp_rate": -1}}, {"train": {"lr_typo": 1}}],
)
def test_bad_config_exit_code(tmp_path, over):
    assert run("gen", "--config", write_config(tmp_path, **over)) == 2


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert run("gen", "--config", p) == 2


def test_bad_threshold_flag(trained):
    cfg_path, _ = trained
    assert run("run", "--config", cfg_path, "--variant", "ste", "--threshold", 1.5) == 2


def test_train_then_run(trained, capsys):
    cfg_path, out = trained
    for name in ("votenet.bin", "training_curve.csv", "votenet_eval.json"):
        assert (out / name).exists()
    summary = json.loads((out / "votenet_eval.json").read_text())
    assert summary["train_seeds"] > 0
    with (out / "training_curve.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 2
    assert run("run", "--config", cfg_path) == 0
    table = capsys.readouterr().out
    for v in ex.VARIANTS:
        assert v in table
    with (out / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["variant"] for r in rows} == set(ex.VARIANTS)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_sha256"] == ex.ExperimentConfig.load(cfg_path).sha256()


def test_retrain_is_byte_identical(trained):
    cfg_path, out = trained
    first = (out / "votenet.bin").read_bytes()
    assert run("train-votenet", "--config", cfg_path) == 0
    assert (out / "votenet.bin").read_bytes() == first


def test_run_is_deterministic_and_worker_independent(trained):
    cfg_path, out = trained
    assert run("run", "--config", cfg_path) == 0
    first = (out / "metrics.csv").read_bytes()
    sweep = (out / "sweep.csv").read_bytes()
    assert run("run", "--config", cfg_path, "--workers", 2) == 0
    assert (out / "metrics.csv").read_bytes() == first
    assert (out / "sweep.csv").read_bytes() == sweep


def test_noiseless_baseline_is_perfect(tmp_path):
    p = write_config(tmp_path, noise=NoiseModel.noiseless().to_dict())
    assert run("gen", "--config", p) == 0
    assert run("run", "--config", p, "--variant", "baseline") == 0
    with (tmp_path / "run" / "metrics.csv").open() as fh:
        rows = [r for r in csv.DictReader(fh) if r["tp"] != "0"]
    assert rows
    for r in rows:
        assert float(r["recall"]) == 1.0 and float(r["precision"]) == 1.0


def test_sweep_and_report(trained, capsys):
    cfg_path, out = trained
    assert run("sweep", "--config", cfg_path) == 0
    with (out / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["c"]) for r in rows] == list(ex.SWEEP_GRID)
    assert run("report", "--config", cfg_path) == 3
    assert run("run", "--config", cfg_path, "--variant", "ste") == 0
    capsys.readouterr()
    assert run("report", "--config", cfg_path) == 0
    assert "Vehicle" in capsys.readouterr().out


def test_divergence_exit_code(tmp_path):
    p = write_config(tmp_path, train={"epochs": 3, "lr": 1e12})
    assert run("gen", "--config", p) == 0
    with pytest.warns(RuntimeWarning):
        assert run("train-votenet", "--config", p) == 4


def test_seed_flag_changes_data(tmp_path):
    p = write_config(tmp_path)
    assert run("gen", "--config", p) == 0
    assert run("gen", "--config", p, "--seed", 1, "--out", tmp_path / "other") == 0
    a = (tmp_path / "run" / "data" / "eval" / "gt.jsonl").read_bytes()
    b = (tmp_path / "other" / "data" / "eval" / "gt.jsonl").read_bytes()
    assert a != b


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "pseudolabel3d", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "train-votenet" in r.stdout
