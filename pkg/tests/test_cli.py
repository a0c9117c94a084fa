import json

import pytest

from smemvqa.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "--task", "abs", "--seed", "7", "--out", str(out), "--n-train", "30", "--n-test", "8"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "2", "--N", "8"]) == 0
    return out


def test_generate_layout(dataset):
    for split, n in (("train", 30), ("test", 8)):
        lines = (dataset / split / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 4 * n
        assert len(list((dataset / split / "images").glob("*.ppm"))) == n
    doc = json.loads((dataset / "run.json").read_text())
    assert doc["seed"] == 7 and doc["config"]["data"]["task"] == "absolute" and "build" in doc


def test_train_writes_checkpoints_and_manifest(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"final.ckpt", "best.ckpt", "vocab.json", "run.json"} <= names
    doc = json.loads((run_dir / "run.json").read_text())
    assert doc["config"]["epochs"] == 2 and "test_accuracy" in doc["metrics"]


def test_config_file_with_flag_override(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "N": 4, "lr": 0.02}}))
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--config", str(cfg), "--N", "6"]) == 0
    doc = json.loads((out / "run.json").read_text())["config"]
    assert (doc["epochs"], doc["N"], doc["lr"]) == (1, 6, 0.02)


def test_eval(run_dir, dataset, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(run_dir / "final.ckpt"), "--data", str(dataset / "test"),
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert 0 <= doc["metrics"]["accuracy"] <= 1 and len(doc["records"]) == 32
    assert "accuracy" in capsys.readouterr().out


def test_eval_vocab_mismatch(run_dir, dataset, tmp_path):
    bad = tmp_path / "vocab.json"
    bad.write_text(json.dumps({"tokens": ["x"], "answers": ["y"], "min_freq": 1, "top_k_answers": None}))
    assert main(["eval", "--checkpoint", str(run_dir / "final.ckpt"), "--vocab", str(bad),
                 "--data", str(dataset / "test")]) == 1


def test_viz(run_dir, dataset, tmp_path):
    out = tmp_path / "viz"
    assert main(["viz", "--checkpoint", str(run_dir / "best.ckpt"), "--data", str(dataset / "test"),
                 "--samples", "0,3", "--out", str(out)]) == 0
    assert (out / "sample_00003_hop1.pgm").exists() and (out / "sample_00000_corr.csv").exists()
    assert (out / "run.json").exists()
    assert main(["viz", "--checkpoint", str(run_dir / "best.ckpt"), "--data", str(dataset / "test"),
                 "--samples", "999", "--out", str(out)]) == 1


def test_position_heuristic_command(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--model", "position-heuristic"]) == 0
    assert "1.0000" in capsys.readouterr().out


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--manifest", str(tmp_path / "g.json")]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert json.loads((tmp_path / "g.json").read_text())["metrics"]["max_rel_error"] < 1e-4


def test_repro_fast_scenario(capsys, tmp_path):
    assert main(["repro", "vqa-consensus", "--manifest", str(tmp_path / "r.json")]) == 0
    assert capsys.readouterr().out.startswith("[PASS] vqa-consensus")


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["generate", "--task", "diagonal", "--out", "x"],
    ["train", "--data", "x", "--out", "y", "--bogus"],
    ["repro", "no-such-scenario"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as e:
        code = main(argv)
        raise SystemExit(code)
    assert e.value.code == 1


def test_missing_dataset_is_usage_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 1
