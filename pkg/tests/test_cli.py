import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from labelqc.cli import main
from labelqc.core import Volume, save_volume
from labelqc.regressor import read_records

TINY_MODEL = {"channels": [4, 8, 8], "d_f": 16, "d_g": 8, "attn_hidden": 16, "batch_size": 32}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = root / "synth.json"
    synth_cfg.write_text(json.dumps({"classes": ["liver", "spleen"], "n_volumes": 5}))
    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({"model": TINY_MODEL, "loss": {"lam": 1.0, "xi": 0.05},
                                     "slices_per_record": 1}))
    corpus = root / "corpus"
    assert main(["--seed", "3", "--config", str(synth_cfg), "synth", "--out", str(corpus)]) == 0
    assert main(["embed", "--vocab", str(corpus), "--provider", "hash_fallback", "--d-t", "8",
                 "--out", str(root / "emb.json")]) == 0
    assert main(["--seed", "1", "--threads", "1", "--config", str(train_cfg), "train", "--corpus", str(corpus),
                 "--embeddings", str(root / "emb.json"), "--out", str(root / "ckpt"), "--epochs", "1"]) == 0
    assert main(["estimate", "--checkpoint", str(root / "ckpt" / "model.npz"), "--manifest", str(corpus),
                 "--split", "all", "-k", "3", "--out", str(root / "est.jsonl")]) == 0
    return root


def test_synth_outputs(pipeline):
    manifest = json.loads((pipeline / "corpus" / "manifest.json").read_text())
    assert len(manifest["records"]) == 2 * 5 * 8
    assert manifest["seed"] == 3


def test_train_outputs(pipeline):
    ck = pipeline / "ckpt"
    assert (ck / "model.npz").exists()
    assert (ck / "epochs" / "epoch_000.npz").exists()
    rows = [json.loads(x) for x in (ck / "train_log.jsonl").read_text().splitlines()]
    assert rows and {"step", "mse_term", "rank_term", "lambda", "xi"} <= set(rows[0])


def test_estimate_outputs(pipeline):
    recs = read_records(pipeline / "est.jsonl")
    assert len(recs) == 2 * 5 * 8
    assert all(0 < r.predicted_dsc < 1 and r.actual_dsc is not None for r in recs)


def test_eval_metrics(pipeline, capsys):
    assert main(["eval-metrics", "--records", str(pipeline / "est.jsonl"), "--ks", "2,5",
                 "--scatter", str(pipeline / "scatter.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"lcc", "srocc", "map@2", "map@5"} <= set(report["overall"])
    assert len(list(csv.reader(open(pipeline / "scatter.csv")))) == 81


def test_report(pipeline):
    out = pipeline / "report.json"
    assert main(["report", "--records", str(pipeline / "est.jsonl"), "--meta", str(pipeline / "corpus"),
                 "--out", str(out), "--csv", str(pipeline / "organs.csv")]) == 0
    rep = json.loads(out.read_text())
    assert rep["n_records"] == 80 and 0 <= rep["fraction_below"] <= 1
    assert len(list(csv.reader(open(pipeline / "organs.csv")))) == 3


def test_estimate_single_volume(pipeline, tmp_path):
    out = tmp_path / "one.jsonl"
    assert main(["estimate", "--checkpoint", str(pipeline / "ckpt" / "model.npz"),
                 "--image", str(pipeline / "corpus" / "images" / "vol0000.vol"),
                 "--mask", str(pipeline / "corpus" / "masks" / "vol0000_c002_s01.vol"),
                 "--class-id", "2", "--mask-is-binary", "--out", str(out)]) == 0
    (rec,) = read_records(out)
    assert rec.volume_id == "vol0000" and rec.class_id == 2


def test_select_quality_and_random(pipeline, capsys):
    assert main(["select", "--method", "quality", "-n", "2", "--records", str(pipeline / "est.jsonl")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["selected"]) == 2
    assert {"seconds", "peak_rss_mb", "bytes_read", "bytes_written"} <= set(out["resources"])
    assert main(["--seed", "5", "select", "--method", "random", "--mode", "pseudo", "-n", "3",
                 "--ids", "a", "b", "c", "d"]) == 0
    assert len(json.loads(capsys.readouterr().out)["selected"]) == 3


def test_select_entropy_from_probability_volumes(tmp_path, capsys):
    paths = []
    for vid, p in (("calm", 0.01), ("unsure", 0.5), ("mid", 0.2)):
        path = tmp_path / f"{vid}.vol"
        save_volume(Volume(np.full((2, 3, 3), p), id=vid), path)
        paths.append(str(path))
    assert main(["select", "--method", "entropy", "-n", "2", "--prob", *paths]) == 0
    assert json.loads(capsys.readouterr().out)["selected"] == ["unsure", "mid"]


def test_select_mc_dropout(tmp_path, capsys):
    paths = []
    for i, p in enumerate((0.0, 1.0)):
        path = tmp_path / f"pass{i}.vol"
        save_volume(Volume(np.full((2, 2, 2), p), id="vol"), path)
        paths.append(str(path))
    assert main(["select", "--method", "mc_dropout", "-n", "1", "--prob", *paths]) == 0
    assert json.loads(capsys.readouterr().out)["selected"] == ["vol"]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "labelqc.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
