import json

import numpy as np
import pytest

from stae import cli
from stae.model import load_checkpoint
from stae.scoring import count_events, detect_events, read_scores, roc_auc_eer, truth_intervals

TINY = {
    "synthetic": {
        "frame_size": 24,
        "n_train_frames": 40,
        "n_test_frames": 60,
        "anomaly_windows": [[10, 20], [35, 45]],
        "anomaly_type": "fast",
    },
    "model": {"frame_size": 16, "time_steps": 3, "encoder": [[2, 4, 2, 1], [2, 4, 2, 1]], "lstm_filters": [2, 2, 2]},
    "train": {"batch_size": 8, "max_epochs": 2},
    "volumes": {"strides": [1, 2]},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture
def pipeline_dirs(tmp_path, cfg_file):
    syn, tr, sc = tmp_path / "syn", tmp_path / "tr", tmp_path / "sc"
    assert cli.main(["synth", "--config", cfg_file, "--out", str(syn)]) == 0
    assert cli.main(["train", str(syn), "--config", cfg_file, "--out", str(tr)]) == 0
    assert cli.main(["score", str(tr / "checkpoint.npz"), str(syn), "--config", cfg_file, "--out", str(sc)]) == 0
    return syn, tr, sc


def test_resolved_config_has_every_default():
    cfg = cli.resolve_config({})
    assert set(cfg) == {"seed", "synthetic", "model", "train", "volumes", "scoring"}
    assert cfg["scoring"] == {"normalization": "max", "window": 50, "persistence_threshold": 0.1, "batch_size": 16}
    assert cfg["train"]["batch_size"] == 64 and cfg["train"]["patience"] == 10
    assert cli.model_config(cfg).encoder[0].kernel == 11


def test_unknown_keys_rejected(tmp_path, capsys):
    with pytest.raises(cli.CliError, match="model.dropout"):
        cli.resolve_config({"model": {"dropout": 0.5}})
    with pytest.raises(cli.CliError, match="section"):
        cli.resolve_config({"optimizer": {}})
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"lr": 1}}')
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("stae: error:") and "\n" not in err


def test_synth_layout_and_determinism(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["synth", "--config", cfg_file, "--out", str(a)]) == 0
    assert cli.main(["synth", "--config", cfg_file, "--out", str(b)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert "train/video_001/000001.pgm" in map(str, files)
    assert "test/video_001/000060.pgm" in map(str, files)
    assert "labels/video_001.csv" in map(str, files)
    assert "config.resolved.json" in map(str, files)
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_synth_invalid_window(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"synthetic": {"n_test_frames": 50, "anomaly_windows": [[40, 70]], "anomaly_type": "fast"}}))
    assert cli.main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) != 0
    assert "[40, 70]" in capsys.readouterr().err


def test_seed_flag_overrides(tmp_path, cfg_file):
    cli.main(["synth", "--config", cfg_file, "--seed", "3", "--out", str(tmp_path / "s")])
    assert json.loads((tmp_path / "s" / "config.resolved.json").read_text())["seed"] == 3


def test_train_score_evaluate(pipeline_dirs, tmp_path, cfg_file):
    syn, tr, sc = pipeline_dirs
    model, arrays, meta = load_checkpoint(tr / "checkpoint.npz")
    assert model.config.frame_size == 16 and "stats.mean_image" in arrays and meta["stats"]["size"] == 16
    lines = (tr / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3
    for d in (syn, tr, sc):
        assert (d / "config.resolved.json").exists()

    series, labels = read_scores(sc / "scores" / "video_001.csv")
    assert len(series.e) == 60 and labels.sum() == 22
    np.testing.assert_array_equal(series.s_r + series.s_a, 1.0)

    ev = tmp_path / "ev"
    assert cli.main(["evaluate", str(sc), "--config", cfg_file, "--out", str(ev)]) == 0
    header = (ev / "metrics.csv").read_text().splitlines()[0]
    assert header == "video,auc,eer,true_detections,false_alarms,missed,persistence_threshold,window"
    summary = json.loads((ev / "metrics.json").read_text())[-1]
    # interface equivalence: same numbers straight from the library
    roc = roc_auc_eer(series.s_a, labels)
    events = detect_events(series, 50, 0.1)
    t, f, m = count_events(events, truth_intervals(labels))
    assert summary["auc"] == roc.auc and summary["eer"] == roc.eer
    assert (summary["true_detections"], summary["false_alarms"], summary["missed"]) == (t, f, m)
    assert (ev / "events" / "video_001.csv").exists()

    de = tmp_path / "de"
    assert cli.main(["detect", str(sc), "--config", cfg_file, "--out", str(de)]) == 0
    assert (de / "events" / "video_001.csv").read_bytes() == (ev / "events" / "video_001.csv").read_bytes()


def test_rerun_from_snapshot_is_byte_identical(pipeline_dirs, tmp_path):
    syn, tr, sc = pipeline_dirs
    snap = str(tr / "config.resolved.json")
    tr2, sc2 = tmp_path / "tr2", tmp_path / "sc2"
    assert cli.main(["train", str(syn), "--config", snap, "--out", str(tr2)]) == 0
    assert (tr2 / "history.csv").read_bytes() == (tr / "history.csv").read_bytes()
    assert (tr2 / "checkpoint.npz").read_bytes() == (tr / "checkpoint.npz").read_bytes()
    assert cli.main(["score", str(tr2 / "checkpoint.npz"), str(syn), "--config", snap, "--out", str(sc2), "--threads", "2"]) == 0
    assert (sc2 / "scores" / "video_001.csv").read_bytes() == (sc / "scores" / "video_001.csv").read_bytes()


def test_score_rejects_mismatched_config(pipeline_dirs, tmp_path, capsys):
    syn, tr, _ = pipeline_dirs
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"model": {"frame_size": 32}}))
    assert cli.main(["score", str(tr / "checkpoint.npz"), str(syn), "--config", str(p), "--out", str(tmp_path / "x")]) != 0
    assert "mismatch" in capsys.readouterr().err


def test_missing_and_empty_inputs(tmp_path, capsys):
    assert cli.main(["train", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) != 0
    (tmp_path / "empty").mkdir()
    assert cli.main(["train", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) != 0
    assert "no videos" in capsys.readouterr().err


def test_empty_test_dir(pipeline_dirs, tmp_path):
    _, tr, _ = pipeline_dirs
    (tmp_path / "none").mkdir()
    assert cli.main(["score", str(tr / "checkpoint.npz"), str(tmp_path / "none"), "--out", str(tmp_path / "o")]) != 0


def test_evaluate_perfect_scores(tmp_path):
    d = tmp_path / "scores"
    d.mkdir()
    lab = [0, 0, 1, 1, 0]
    s_a = [0.0, 0.1, 0.9, 1.0, 0.2]
    rows = ["frame_index,e,s_a,s_r,label"] + [f"{i + 1},{a},{a},{1 - a},{l}" for i, (a, l) in enumerate(zip(s_a, lab))]
    (d / "v.csv").write_text("\n".join(rows) + "\n")
    assert cli.main(["evaluate", str(d), "--out", str(tmp_path / "ev")]) == 0
    m = json.loads((tmp_path / "ev" / "metrics.json").read_text())[0]
    assert m["auc"] == 1.0 and m["eer"] == 0.0


def test_evaluate_single_class_rejected(tmp_path, capsys):
    d = tmp_path / "scores"
    d.mkdir()
    (d / "v.csv").write_text("frame_index,e,s_a,s_r,label\n1,1,0,1,0\n2,2,0.5,0.5,0\n")
    assert cli.main(["evaluate", str(d), "--out", str(tmp_path / "ev")]) != 0
    assert "both classes" in capsys.readouterr().err


def test_evaluate_misaligned_labels(tmp_path, capsys):
    d = tmp_path / "scores"
    d.mkdir()
    (d / "v.csv").write_text("frame_index,e,s_a,s_r\n1,1,0,1\n2,2,0.5,0.5\n")
    (tmp_path / "lab.csv").write_text("frame_index,label\n1,0\n2,1\n3,1\n")
    assert cli.main(["evaluate", str(d), "--labels", str(tmp_path / "lab.csv"), "--out", str(tmp_path / "ev")]) != 0
    assert "align" in capsys.readouterr().err


def test_perfect_stub_scores_are_fully_regular():
    frames = np.random.default_rng(0).normal(size=(15, 8, 8))
    series, _ = cli.score_sequence(lambda b: b, frames, 10, cli.SCORING_DEFAULTS)
    np.testing.assert_array_equal(series.s_r, 1.0)
