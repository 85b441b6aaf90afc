import json

import numpy as np
import pytest
import yaml
from PIL import Image

from atme.cli import main

from conftest import TINY


def write_config(path, root, **extra):
    doc = {**TINY, "data.root": str(root), **extra}
    path.write_text(yaml.safe_dump(doc))
    return path


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.yaml"), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["train", "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["frobnicate"]) == 2


def test_typo_key_suggests_valid_key(tmp_path, toy_root, capsys):
    cfg = write_config(tmp_path / "c.yaml", toy_root)
    code = main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--set", "gen.embed_dm=8"])
    assert code == 2
    assert "did you mean 'gen.embed_dim'" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, toy_root):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "c.yaml", toy_root)
    assert main(["train", "--config", str(cfg), "--out-dir", str(out / "run"), "--set", "train.epochs_decay=0"]) == 0
    return out / "run"


def test_train_writes_run_directory(trained_run):
    names = {p.name for p in trained_run.iterdir()}
    assert {"manifest.json", "config.yaml", "history.csv", "checkpoint_last.pt", "checkpoint_0002.pt"} <= names
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert manifest["seeds"] == {"train": 0, "data": 0} and len(manifest["config_hash"]) == 64
    assert len((trained_run / "history.csv").read_text().splitlines()) == 3


def test_rerun_from_manifest_reproduces_history(trained_run, tmp_path):
    manifest = json.loads((trained_run / "manifest.json").read_text())
    cfg = tmp_path / "again.yaml"
    cfg.write_text(yaml.safe_dump(manifest["config"]))
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "history.csv").read_bytes() == (trained_run / "history.csv").read_bytes()


def test_infer_directory(trained_run, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(5):
        Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(src / f"img{i}.png")
    out = tmp_path / "out"
    args = ["infer", "--checkpoint", str(trained_run / "checkpoint_last.pt"), "--input", str(src), "--seed", "3"]
    assert main(args + ["--out-dir", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == [f"img{i}.png" for i in range(5)]
    assert main(args + ["--out-dir", str(tmp_path / "out2")]) == 0
    assert all((out / n).read_bytes() == (tmp_path / "out2" / n).read_bytes() for n in (f"img{i}.png" for i in range(5)))


def test_infer_resolution_mismatch(trained_run, tmp_path):
    Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(tmp_path / "small.png")
    code = main(["infer", "--checkpoint", str(trained_run / "checkpoint_last.pt"), "--input",
                 str(tmp_path / "small.png"), "--out-dir", str(tmp_path / "o")])
    assert code == 2


def test_corrupt_checkpoint_exits_with_failure(tmp_path, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"corrupt")
    Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(tmp_path / "x.png")
    code = main(["infer", "--checkpoint", str(bad), "--input", str(tmp_path / "x.png"), "--out-dir",
                 str(tmp_path / "o")])
    assert code == 1 and "cannot load checkpoint" in capsys.readouterr().err


def test_resume_continues_schedule(trained_run, tmp_path):
    out = tmp_path / "resumed"
    assert main(["train", "--resume", str(trained_run / "checkpoint_0002.pt"), "--out-dir", str(out),
                 "--set", "train.epochs_decay=1"]) == 0
    assert len((out / "history.csv").read_text().splitlines()) == 4


def test_plot(trained_run, tmp_path):
    assert main(["plot", "--history", str(trained_run / "history.csv"), "--out", str(tmp_path / "p.png")]) == 0
    assert (tmp_path / "p.png").stat().st_size > 0
    empty = tmp_path / "empty.csv"
    empty.write_text((trained_run / "history.csv").read_text().splitlines()[0] + "\n")
    assert main(["plot", "--history", str(empty), "--out", str(tmp_path / "q.png")]) == 1
    assert main(["plot", "--history", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "q.png")]) == 2


def test_eval_identical_dirs(tmp_path, capsys):
    # a pool much larger than the subset size keeps the shared-sample bias below the noise
    d = tmp_path / "imgs"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(1000):
        Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(d / f"{i:04d}.png")
    out = tmp_path / "kid.json"
    assert main(["eval", "--real-dir", str(d), "--fake-dir", str(d), "--extractor", "random-proj",
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert abs(res["mean"]) < 3 * res["std"] and res["n_real"] == 1000 and res["scaled_by_100"]


def test_eval_missing_weights(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ATME_WEIGHTS_DIR", str(tmp_path))
    (tmp_path / "a").mkdir()
    assert main(["eval", "--real-dir", str(tmp_path / "a"), "--fake-dir", str(tmp_path / "a")]) == 1
    assert "inception" in capsys.readouterr().err.lower()


def test_make_toy(tmp_path):
    assert main(["make-toy", "--root", str(tmp_path), "--n", "3", "--size", "16"]) == 0
    assert len(list((tmp_path / "train").iterdir())) == 3
