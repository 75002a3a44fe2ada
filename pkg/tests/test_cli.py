import json

import numpy as np
import pytest

from geomnet import cli
from geomnet.data import SBU_FOLDS
from geomnet.selfcheck import run_selfcheck
from geomnet.train import TrainingDiverged

TINY = """d = 3
n_clusters = 4
epochs = 2
synthetic_train = 10
synthetic_test = 6
batch_size = 5
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(args):
    return cli.main([str(a) for a in args])


def test_train_writes_outputs(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", tiny, "--out", out]) == 0
    assert "test accuracy" in capsys.readouterr().out
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["runs"][0]["lw_is_identity"] is False
    assert summary["runs"][0]["parallel_transport"] is True
    assert "epochs = 2" in (out / "config.txt").read_text()
    with np.load(out / "params.npz") as data:
        assert "__config__" in data.files and "conv" in data.files


def test_train_is_deterministic(tiny, tmp_path):
    for name in ("a", "b"):
        assert run(["train", "--config", tiny, "--out", tmp_path / name]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()


def test_zero_epochs(tiny, tmp_path):
    out = tmp_path / "run"
    assert run(["train", "--config", tiny, "--epochs", 0, "--out", out]) == 0
    assert (out / "metrics.jsonl").read_text() == ""
    assert (out / "params.npz").exists()


def test_ablation_flags(tiny, tmp_path):
    out = tmp_path / "run"
    assert run(["train", "--config", tiny, "--no-pt", "--no-ltml", "--out", out]) == 0
    entry = json.loads((out / "summary.json").read_text())["runs"][0]
    assert entry["lw_is_identity"] is True and entry["parallel_transport"] is False


def test_eval_matches_training_accuracy(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", tiny, "--out", out]) == 0
    summary = json.loads((out / "summary.json").read_text())["runs"][0]
    capsys.readouterr()
    assert run(["eval", "--config", tiny, "--params", out / "params.npz", "--split", "train",
                "--out", out]) == 0
    report = json.loads((out / "eval.json").read_text())["results"][0]
    assert report["accuracy"] == summary["train_accuracy"]
    conf = np.array(report["confusion"])
    np.testing.assert_array_equal(conf.sum(axis=1), [5, 5])
    assert "confusion" in capsys.readouterr().out


def test_random_model_is_near_chance(tmp_path):
    path = tmp_path / "chance.cfg"
    path.write_text(TINY.replace("synthetic_test = 6", "synthetic_test = 40"))
    out = tmp_path / "run"
    assert run(["train", "--config", path, "--epochs", 0, "--out", out]) == 0
    report = cli.run_eval(out / "params.npz", cli.load_config(path))["results"][0]
    # three binomial standard deviations around 1/2
    assert abs(report["accuracy"] - 0.5) <= 3 * np.sqrt(0.25 / 40)


def test_eval_dimension_mismatch(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", tiny, "--epochs", 0, "--out", out]) == 0
    assert run(["eval", "--config", tiny, "--k", 3, "--params", out / "params.npz"]) == 1
    assert "do not fit" in capsys.readouterr().err


def test_eval_empty_split(tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text(TINY.replace("synthetic_test = 6", "synthetic_test = 0"))
    out = tmp_path / "run"
    assert run(["train", "--config", path, "--epochs", 0, "--out", out]) == 0
    assert run(["eval", "--config", path, "--params", out / "params.npz"]) == 1
    assert "empty" in capsys.readouterr().err


def test_eval_missing_params(tiny, tmp_path):
    assert run(["eval", "--config", tiny, "--params", tmp_path / "none.npz"]) == 1


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run(["train", "--config", bad]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert run(["train", "--config", tmp_path / "missing.cfg"]) == 1


def test_thread_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "two")
    assert run(["train", "--config", tiny, "--epochs", 0, "--out", tmp_path / "r"]) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run(["train", "--config", tiny, "--epochs", 0, "--out", tmp_path / "r"]) == 0


def test_numeric_failure_exit_2(tiny, tmp_path, monkeypatch, capsys):
    def diverge(*args, **kwargs):
        raise TrainingDiverged("non-finite loss in epoch 1", {"conv": 1.5})

    monkeypatch.setattr(cli, "train", diverge)
    assert run(["train", "--config", tiny, "--out", tmp_path / "r"]) == 2
    err = capsys.readouterr().err
    assert "non-finite" in err and "conv: 1.5" in err


def test_selfcheck_exit_codes(monkeypatch, capsys):
    assert run(["selfcheck", "--sizes", "2,3", "--trials", 3]) == 0
    assert "PASS" in capsys.readouterr().out
    assert run(["selfcheck", "--sizes", "two"]) == 1
    broken = lambda q, p, a: a  # noqa: E731  transport that ignores the geometry
    monkeypatch.setattr(cli, "run_selfcheck",
                        lambda seed, sizes, trials: run_selfcheck(seed, sizes, trials, broken))
    assert run(["selfcheck", "--trials", 3]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_sbu_fold_run(tmp_path, rng):
    root = tmp_path / "sbu"
    for i, group in enumerate(g for fold in SBU_FOLDS for g in fold):
        for cls in (1, 2):
            f = root / group / f"0{cls}" / "001" / "skeleton_pos.txt"
            f.parent.mkdir(parents=True)
            frames = rng.normal(size=(5, 90))
            f.write_text("\n".join(",".join(map(repr, row)) for row in frames.tolist()) + "\n")
    cfg = tmp_path / "sbu.cfg"
    cfg.write_text(f"preset = sbu\ndata_path = {root}\nd = 2\nn_clusters = 2\nk_prime = 1\n"
                   "epochs = 1\nbatch_size = 8\n")
    out = tmp_path / "run"
    assert run(["train", "--config", cfg, "--out", out]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["name"] for r in summary["runs"]] == ["fold1"]
    assert (out / "params_fold1.npz").exists()
    # an empty data directory is a configuration error
    empty = tmp_path / "empty.cfg"
    empty.write_text(f"preset = sbu\ndata_path = {tmp_path / 'nothing'}\n")
    assert run(["train", "--config", empty, "--out", out]) == 1
