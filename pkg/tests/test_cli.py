import json
import subprocess
import sys

import pytest

from sigstream.cli import main
from sigstream.synthetic import longitudinal_streams, write_fixture

FFN = {"family": "ffn", "head": {"hidden": [8], "dropout": 0.0, "num_classes": 2}}
SEQ = {
    "family": "seq_sig_net",
    "w": 5,
    "k": 3,
    "n": 3,
    "unit": {"output_channels": 3, "hidden_dim": 3, "depth": 2, "recurrence": "lstm", "dropout": 0.0},
    "aggregator": {"kind": "bilstm", "hidden_dim": 4, "dropout": 0.0},
    "head": {"hidden": [4], "dropout": 0.0, "num_classes": 2},
}


@pytest.fixture
def workspace(tmp_path):
    ds = longitudinal_streams(num_streams=10, length=8, channels=4, seed=3)
    meta, emb = write_fixture(ds, tmp_path / "raw")

    def write_config(name="config.json", **overrides):
        cfg = {
            "data": {"metadata": str(meta), "embeddings": str(emb), "num_classes": 2},
            "split": {"mode": "kfold", "folds": 5, "seed": 0},
            "model": FFN,
            "train": {"max_epochs": 2, "batch_size": 16, "seeds": [1]},
            "event_classes": [1],
            "class_names": ["flat", "rising"],
            "output_dir": str(tmp_path / "out"),
        }
        cfg.update(overrides)
        path = tmp_path / name
        path.write_text(json.dumps(cfg))
        return path

    return tmp_path, write_config


def run(*args):
    return main([str(a) for a in args])


def test_prepare_writes_manifest_and_is_reproducible(workspace):
    tmp, write_config = workspace
    cfg = write_config()
    assert run("prepare", "--config", cfg) == 0
    manifest = json.loads((tmp / "out/prepared/manifest.json").read_text())
    assert manifest["num_streams"] == 10 and manifest["num_records"] == 80
    assert len(manifest["records_per_stream"]) == 10
    assert run("prepare", "--config", cfg) == 0
    again = json.loads((tmp / "out/prepared/manifest.json").read_text())
    assert again["files"] == manifest["files"]


def test_missing_embeddings_is_io_error(workspace, capsys):
    tmp, write_config = workspace
    cfg = write_config(data={"metadata": str(tmp / "raw/metadata.csv"), "embeddings": str(tmp / "nope.sgem")})
    assert run("prepare", "--config", cfg) == 2
    assert "nope.sgem" in capsys.readouterr().err


def test_bad_config_is_validation_error(workspace, capsys):
    tmp, write_config = workspace
    assert run("prepare", "--config", write_config(bogus=1)) == 1
    assert "bogus" in capsys.readouterr().err
    assert run("train", "--config", write_config(model={**FFN, "family": "nope"})) == 1
    bad = tmp / "bad.json"
    bad.write_text("{not json")
    assert run("prepare", "--config", bad) == 1
    assert run("prepare", "--config", tmp / "absent.json") == 2


def test_stats_reports_time_diff(workspace, capsys):
    tmp, write_config = workspace
    cfg = write_config()
    run("prepare", "--config", cfg)
    capsys.readouterr()
    assert run("stats", "--config", cfg) == 0
    out = capsys.readouterr().out
    line = next(ln for ln in out.splitlines() if ln.startswith("Mean Point Time Diff."))
    assert "60s (1min)" in line
    assert json.loads((tmp / "out/stats.json").read_text())["mean_time_diff_seconds"] == 60.0


def test_stats_with_no_events(tmp_path, capsys):
    ds = longitudinal_streams(num_streams=4, length=5, channels=2, seed=0)
    ds.labels[:] = 0
    meta, emb = write_fixture(ds, tmp_path / "raw")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "data": {"metadata": str(meta), "embeddings": str(emb), "num_classes": 2},
        "split": {"mode": "single", "fractions": [0.5, 0.25, 0.25], "seed": 0},
        "event_classes": [1],
        "output_dir": str(tmp_path / "out"),
    }))
    assert run("prepare", "--config", cfg) == 0
    capsys.readouterr()
    assert run("stats", "--config", cfg, "--format", "json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["events"][0]["events"] == 0


def test_train_outputs_and_table(workspace, capsys):
    tmp, write_config = workspace
    cfg = write_config()
    run("prepare", "--config", cfg)
    capsys.readouterr()
    assert run("train", "--config", cfg, "--seed-list", "1,12") == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header[-3:] == ["F1[flat]", "F1[rising]", "macro-F1"]
    out = tmp / "out/train"
    assert len((out / "results.jsonl").read_text().splitlines()) == 10
    for name in ("summary.txt", "results.json", "best/model.sgem", "best/model.json"):
        assert (out / name).exists()


def test_train_is_byte_reproducible(workspace):
    tmp, write_config = workspace
    cfg = write_config()
    run("prepare", "--config", cfg)
    texts = []
    for _ in range(2):
        assert run("train", "--config", cfg) == 0
        results = json.loads((tmp / "out/train/results.json").read_text())
        results.pop("timestamp")
        texts.append(json.dumps(results, sort_keys=True))
        texts.append((tmp / "out/train/results.jsonl").read_text())
    assert texts[0] == texts[2] and texts[1] == texts[3]


def test_tune_writes_one_row_per_run(workspace):
    tmp, write_config = workspace
    grid = {"train.lr": [1e-3, 5e-4, 1e-4], "head.hidden": [[4], [8]]}
    cfg = write_config(grid=grid, train={"max_epochs": 1, "batch_size": 32, "seeds": [1, 12, 123]})
    run("prepare", "--config", cfg)
    assert run("tune", "--config", cfg, "--jobs", "2") == 0
    rows = [json.loads(ln) for ln in (tmp / "out/tune/results.jsonl").read_text().splitlines()]
    assert len(rows) == 90
    summary = json.loads((tmp / "out/tune/results.json").read_text())
    assert summary["best_index"] in range(6)
    assert run("eval", "--config", cfg, "--from-tune", "--fold", "0") == 0
    assert json.loads((tmp / "out/eval.json").read_text())["fold"] == 0


def test_seq_sig_net_history_length(workspace):
    tmp, write_config = workspace
    cfg = write_config(model=SEQ)
    assert run("prepare", "--config", cfg) == 0
    manifest = json.loads((tmp / "out/prepared/manifest.json").read_text())
    assert manifest["history"]["history_length"] == 11


def test_eval_after_train(workspace, capsys):
    tmp, write_config = workspace
    cfg = write_config(model=SEQ)
    run("prepare", "--config", cfg)
    assert run("eval", "--config", cfg) == 2
    assert run("train", "--config", cfg) == 0
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--format", "json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert 0.0 <= payload["test"]["macro_f1"] <= 1.0


def test_console_entry_point(workspace):
    _, write_config = workspace
    proc = subprocess.run([sys.executable, "-m", "sigstream.cli", "stats", "--config", str(write_config())], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "prepare" in proc.stderr
