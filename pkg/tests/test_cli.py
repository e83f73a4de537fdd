import json
from dataclasses import replace

import numpy as np
import pytest

from radarghosts import experiment as ex
from radarghosts import nnet
from radarghosts.cli import main
from radarghosts.core import ClassConfig, read_sequence
from radarghosts.simulate import corridor


def tiny_config() -> ex.ExperimentConfig:
    cfg = ex.default_config()
    return replace(
        cfg, name="tiny", recordings=ex.corridor_suite(n_frames=30),
        overlays=replace(cfg.overlays, count={"TRAIN": 1, "VAL": 0, "TEST": 1}, out_len=20),
        preprocess=replace(cfg.preprocess, num_points=512, train_stride=3, eval_stride=5),
        train=replace(cfg.train, steps=10, log_every=0),
        detector=replace(cfg.detector, dbscan_grid={"eps": [1.0, 1.5]}),
    )


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps(tiny_config().to_dict()))
    assert main(["simulate", "--config", str(cfg), "--out", str(d / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "model.json")]) == 0
    assert main(["detect", "--model", str(d / "model.json"), "--data", str(d / "data"), "--config", str(cfg),
                 "--out", str(d / "dets.jsonl")]) == 0
    return d


def test_pipeline_outputs(run, capsys):
    assert main(["evaluate", "--detections", str(run / "dets.jsonl"), "--data", str(run / "data"),
                 "--model", str(run / "model.json"), "--out", str(run / "metrics.json")]) == 0
    m = json.loads((run / "metrics.json").read_text())
    assert set(m["ap"]) == {"0.3", "0.5"}
    assert "Obj" in (run / "metrics.json.txt").read_text()
    for name in ("data", "model.json", "dets.jsonl", "metrics.json"):
        man = json.loads((run / f"{name}.manifest.json").read_text())
        assert man["outputs"] and len(man["config_hash"] or "x" * 64) == 64
    seq = next((run / "data").glob("*-0.jsonl"))
    assert main(["report", "--metrics", str(run / "metrics.json"), "--sequence", str(seq), "--frame", "10",
                 "--detections", str(run / "dets.jsonl"), "--svg", str(run / "snap.svg"),
                 "--out", str(run / "report.txt")]) == 0
    assert (run / "snap.svg").read_text().startswith("<svg")
    assert "AP" in (run / "report.txt").read_text() or "Obj" in (run / "report.txt").read_text()


def test_rerun_is_identical(run, capsys):
    for name in ("data", "model.json", "dets.jsonl"):
        assert main(["rerun", str(run / f"{name}.manifest.json")]) == 0
        assert capsys.readouterr().out.strip().endswith("identical")


def test_rerun_detects_tampering(run, tmp_path, capsys):
    man = json.loads((run / "dets.jsonl.manifest.json").read_text())
    key = next(iter(man["outputs"]))
    man["outputs"][key] = "0" * 64
    (tmp_path / "m.json").write_text(json.dumps(man))
    assert main(["rerun", str(tmp_path / "m.json")]) == 3
    assert "differ" in capsys.readouterr().out


def test_simulate_is_deterministic(tmp_path):
    cfg = tmp_path / "sc.json"
    cfg.write_text(json.dumps(corridor(n_frames=40).to_dict()))
    for out in ("a.jsonl", "b.jsonl"):
        assert main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert main(["simulate", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "c.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()
    assert len(read_sequence(tmp_path / "a.jsonl")) == 40


def test_zero_weight_model_scores_zero(run, tmp_path):
    net = nnet.NetConfig(n_classes=ClassConfig().num_classes)
    model = nnet.Model(nnet.zero_params(net), net, nnet.LossWeights((1.0, 1.0, 1.0)), ClassConfig())
    nnet.save_model(model, tmp_path / "zero.json")
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(tiny_config().to_dict()))
    assert main(["detect", "--model", str(tmp_path / "zero.json"), "--data", str(run / "data"), "--config", str(cfg),
                 "--out", str(tmp_path / "d.jsonl")]) == 0
    assert main(["evaluate", "--detections", str(tmp_path / "d.jsonl"), "--data", str(run / "data"),
                 "--out", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert all(v == 0.0 for aps in m["ap"].values() for v in aps.values())


def test_config_errors_exit_nonzero_with_field_names(tmp_path, capsys):
    doc = tiny_config().to_dict()
    doc["preprocess"]["num_points"] = -5
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == 2
    assert "num_points" in capsys.readouterr().err
    doc = tiny_config().to_dict()
    doc["recordings"][-1]["preset_args"]["scenario_id"] = "corridor-a"  # test recording in a train scenario
    (tmp_path / "leak.json").write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(tmp_path / "leak.json"), "--out", str(tmp_path / "y")]) == 2
    assert "corridor-a" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "z")]) == 2


def test_ghosts_table(tmp_path, capsys):
    cfg = tmp_path / "sc.json"
    cfg.write_text(json.dumps(corridor(n_frames=40).to_dict()))
    assert main(["ghosts", "--config", str(cfg), "--every", "20"]) == 0
    out = capsys.readouterr().out
    assert "MP12" in out and "MP23" in out
