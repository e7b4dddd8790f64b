"""Command-line driver: ``stae synth | train | score | detect | evaluate``.

Every command reads an optional JSON run configuration (``--config``), fills
in defaults, and writes the resolved result to ``config.resolved.json`` in its
output directory.  Feeding that file back with ``--config`` reproduces the run.

Output layout::

    synth     out/train/video_001/000001.pgm ...   out/test/video_001/...   out/labels/video_001.csv
    train     out/checkpoint.npz   out/history.csv
    score     out/scores/<video>.csv
    detect    out/events/<video>.csv
    evaluate  out/events/<video>.csv   out/metrics.csv   out/metrics.json
"""

import argparse
import dataclasses
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .model import ModelConfig, build, load_checkpoint, save_checkpoint
from .optim import TrainSettings, train, write_history
from .pipeline import (
    PreprocessStats,
    StrideSet,
    SyntheticSpec,
    apply_preprocess,
    build_volumes,
    fit_preprocess,
    generate_synthetic,
    ingest,
    read_labels,
    write_frames,
    write_labels,
)
from .scoring import (
    count_events,
    detect_events,
    frame_errors,
    read_scores,
    regularity,
    roc_auc_eer,
    truth_intervals,
    write_events,
    write_scores,
)

SCORING_DEFAULTS = {"normalization": "max", "window": 50, "persistence_threshold": 0.1, "batch_size": 16}
STRIDE_DEFAULTS = {"strides": [1, 2, 3]}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _fields(cls, skip=("seed",)):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


def default_config():
    model = ModelConfig().to_dict()
    model.pop("seed")
    model["decoder"] = None  # mirror of the encoder
    return {
        "seed": 0,
        "synthetic": {k: _plain(v) for k, v in _fields(SyntheticSpec).items()},
        "model": _plain(model),
        "train": _fields(TrainSettings),
        "volumes": dict(STRIDE_DEFAULTS),
        "scoring": dict(SCORING_DEFAULTS),
    }


def resolve_config(user=None, seed=None):
    """Merge a user config over the defaults, rejecting unknown keys."""
    cfg = default_config()
    user = user or {}
    if not isinstance(user, dict):
        raise CliError("config must be a JSON object")
    for key, val in user.items():
        if key not in cfg:
            raise CliError(f"unknown config section {key!r}; expected one of {sorted(cfg)}")
        if key == "seed":
            cfg["seed"] = int(val)
            continue
        if not isinstance(val, dict):
            raise CliError(f"config section {key!r} must be an object")
        for k, v in val.items():
            if k not in cfg[key]:
                raise CliError(f"unknown key {key}.{k}; expected one of {sorted(cfg[key])}")
            cfg[key][k] = v
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def load_config(path, seed=None):
    """Returns ``(resolved, user)`` where ``user`` is the raw file content."""
    user = None
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise CliError(f"config {path} is not valid JSON: {e}") from None
    return resolve_config(user, seed), user or {}


def model_config(cfg):
    return ModelConfig.from_dict({**cfg["model"], "seed": cfg["seed"]})


def train_settings(cfg):
    return TrainSettings(**{**cfg["train"], "seed": cfg["seed"]})


def synthetic_spec(cfg):
    d = dict(cfg["synthetic"])
    d["anomaly_windows"] = tuple(tuple(w) for w in d["anomaly_windows"])
    d["speed_range"] = tuple(d["speed_range"])
    if not isinstance(d["anomaly_type"], str):
        d["anomaly_type"] = tuple(d["anomaly_type"])
    return SyntheticSpec(**d)


def _prepare_out(out, cfg):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# data discovery


def find_videos(path, role=None):
    """List ``(name, FrameSequence)`` under ``path``.

    ``path`` may be one frame directory, one raw container, a directory of
    videos, or a ``synth`` output root (in which case ``role`` picks
    ``train`` or ``test``).
    """
    path = Path(path)
    if not path.exists():
        raise CliError(f"{path}: no such file or directory")
    if role and (path / role).is_dir():
        path = path / role
    if path.is_file():
        return [(path.stem, ingest(path))]
    if any(p.suffix == ".pgm" for p in path.iterdir()):
        return [(path.name, ingest(path))]
    entries = sorted(p for p in path.iterdir() if p.is_dir() or p.suffix == ".raw")
    if not entries:
        raise CliError(f"{path}: no videos found")
    return [(p.stem if p.is_file() else p.name, ingest(p)) for p in entries]


def _labels_dir(test_path, labels):
    if labels is not None:
        return Path(labels)
    guess = Path(test_path) / "labels"
    return guess if guess.is_dir() else None


def _load_labels(labels_dir, name, n_frames):
    if labels_dir is None:
        return None
    f = Path(labels_dir) / f"{name}.csv"
    if not f.exists():
        return None
    idx, lab = read_labels(f)
    if len(lab) != n_frames or not np.array_equal(idx, np.arange(1, n_frames + 1)):
        raise CliError(f"{f}: labels cover frames {idx[0]}..{idx[-1]} but the video has {n_frames} frames")
    return lab


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, out_dir):
    spec = synthetic_spec(cfg)
    train_seq, test_seq, labels = generate_synthetic(spec, cfg["seed"])
    out = _prepare_out(out_dir, cfg)
    write_frames(out / "train" / "video_001", train_seq)
    write_frames(out / "test" / "video_001", test_seq)
    (out / "labels").mkdir(exist_ok=True)
    write_labels(out / "labels" / "video_001.csv", labels)
    return {"train_frames": len(train_seq), "test_frames": len(test_seq), "anomalous_frames": int(labels.sum())}


def cmd_train(cfg, data_dir, out_dir, log=None):
    videos = find_videos(data_dir, "train")
    mcfg = model_config(cfg)
    strides = StrideSet(tuple(cfg["volumes"]["strides"]), mcfg.time_steps)
    stats = fit_preprocess([seq for _, seq in videos], mcfg.frame_size)
    volumes = []
    for _, seq in videos:
        volumes += build_volumes(apply_preprocess(seq, stats), strides)
    model = build(mcfg)
    out = _prepare_out(out_dir, cfg)
    result = train(model, volumes, train_settings(cfg), log=log)
    save_checkpoint(out / "checkpoint.npz", model, stats.to_arrays(), {"stats": stats.to_meta()})
    write_history(out / "history.csv", result.history)
    return {
        "volumes": len(volumes),
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "initial_train_loss": result.initial_train_loss,
    }


def _load_model(checkpoint, cfg, user_model):
    try:
        model, arrays, meta = load_checkpoint(checkpoint)
    except (OSError, KeyError) as e:
        raise CliError(f"cannot load checkpoint {checkpoint}: {e}") from None
    if "stats" not in meta:
        raise CliError(f"{checkpoint} carries no preprocessing statistics")
    stats = PreprocessStats.from_checkpoint(arrays, meta["stats"])
    if stats.size != model.config.frame_size:
        raise CliError(f"{checkpoint}: statistics size {stats.size} != model frame size {model.config.frame_size}")
    stored = model.config.to_dict()
    for k, v in (user_model or {}).items():
        if k == "decoder" and v is None:
            continue
        try:
            asked = getattr(ModelConfig.from_dict({**stored, k: v}), k)
        except (TypeError, ValueError) as e:
            raise CliError(f"invalid model.{k} in config: {e}") from None
        if asked != getattr(model.config, k):
            raise CliError(f"checkpoint/config mismatch on model.{k}: checkpoint has {stored.get(k)!r}, config has {v!r}")
    return model, stats


def score_sequence(forward, frames, T, scoring, labels=None):
    e = frame_errors(forward, frames, T, scoring["batch_size"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return regularity(e, scoring["normalization"]), labels


def cmd_score(cfg, checkpoint, test_dir, out_dir, labels=None, threads=1, user_model=None):
    model, stats = _load_model(checkpoint, cfg, user_model)
    videos = find_videos(test_dir, "test")
    lab_dir = _labels_dir(test_dir, labels)
    out = _prepare_out(out_dir, cfg)
    (out / "scores").mkdir(exist_ok=True)

    def job(item):
        name, seq = item
        frames = apply_preprocess(seq, stats)
        lab = _load_labels(lab_dir, name, len(frames))
        series, _ = score_sequence(model.forward, frames, model.config.time_steps, cfg["scoring"])
        write_scores(out / "scores" / f"{name}.csv", series, lab)
        return name

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        names = list(pool.map(job, videos))
    return {"videos": names}


def _score_files(scores_dir):
    p = Path(scores_dir)
    if not p.exists():
        raise CliError(f"{p}: no such directory")
    if (p / "scores").is_dir():
        p = p / "scores"
    files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if not files:
        raise CliError(f"{p}: no score CSVs found")
    return files


def cmd_detect(cfg, scores_dir, out_dir):
    sc = cfg["scoring"]
    files = _score_files(scores_dir)
    out = _prepare_out(out_dir, cfg)
    (out / "events").mkdir(exist_ok=True)
    found = {}
    for f in files:
        series, _ = read_scores(f)
        events = detect_events(series, sc["window"], sc["persistence_threshold"])
        write_events(out / "events" / f.name, events)
        found[f.stem] = [g.representative for g in events]
    return found


METRIC_COLUMNS = ["video", "auc", "eer", "true_detections", "false_alarms", "missed", "persistence_threshold", "window"]


def cmd_evaluate(cfg, scores_dir, out_dir, labels=None):
    sc = cfg["scoring"]
    files = _score_files(scores_dir)
    out = _prepare_out(out_dir, cfg)
    (out / "events").mkdir(exist_ok=True)
    rows, pooled_s, pooled_l = [], [], []
    totals = np.zeros(3, dtype=int)
    for f in files:
        series, lab = read_scores(f)
        if labels is not None:
            lab_file = Path(labels) if Path(labels).is_file() else Path(labels) / f.name
            idx, lab = read_labels(lab_file)
            if not np.array_equal(idx, series.frame_indices):
                raise CliError(f"{lab_file}: frame indices do not align with {f}")
        if lab is None:
            raise CliError(f"{f}: no labels in the score file and none given with --labels")
        roc = roc_auc_eer(series.s_a, lab)
        events = detect_events(series, sc["window"], sc["persistence_threshold"])
        write_events(out / "events" / f.name, events)
        counts = count_events(events, truth_intervals(lab, series.frame_indices))
        totals += counts
        rows.append([f.stem, roc.auc, roc.eer, *counts, sc["persistence_threshold"], sc["window"]])
        pooled_s.append(series.s_a)
        pooled_l.append(lab)
    roc = roc_auc_eer(np.concatenate(pooled_s), np.concatenate(pooled_l))
    rows.append(["all", roc.auc, roc.eer, *totals.tolist(), sc["persistence_threshold"], sc["window"]])

    with open(out / "metrics.csv", "w", newline="\n") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in r) + "\n")
    records = [dict(zip(METRIC_COLUMNS, (int(v) if isinstance(v, np.integer) else v for v in r))) for r in rows]
    (out / "metrics.json").write_text(json.dumps(records, indent=2) + "\n")
    return records[-1]


# ---------------------------------------------------------------------------
# argument parsing


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="parallel videos when scoring")
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="stae", description="Spatiotemporal autoencoder video anomaly detection")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render a synthetic train/test scenario")
    t = sub.add_parser("train", parents=[common], help="fit a model on normal videos")
    t.add_argument("data_dir")
    s = sub.add_parser("score", parents=[common], help="per-frame regularity scores")
    s.add_argument("checkpoint")
    s.add_argument("test_dir")
    s.add_argument("--labels", help="directory of <video>.csv label files")
    d = sub.add_parser("detect", parents=[common], help="persistence-grouped events from score CSVs")
    d.add_argument("scores_dir")
    e = sub.add_parser("evaluate", parents=[common], help="AUC, EER and event counts")
    e.add_argument("scores_dir")
    e.add_argument("--labels", help="label CSV or directory of them (default: label column of the scores)")
    return p


def run(argv=None):
    """Run one command and return its summary; raises on failure."""
    args = _parser().parse_args(argv)
    cfg, user = load_config(args.config, args.seed)
    user_model = user.get("model")
    if args.command == "synth":
        return cmd_synth(cfg, args.out)
    if args.command == "train":
        log = lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.6f} val {r.val_loss:.6f}", flush=True)  # noqa: E731
        return cmd_train(cfg, args.data_dir, args.out, log)
    if args.command == "score":
        return cmd_score(cfg, args.checkpoint, args.test_dir, args.out, args.labels, args.threads, user_model)
    if args.command == "detect":
        return cmd_detect(cfg, args.scores_dir, args.out)
    return cmd_evaluate(cfg, args.scores_dir, args.out, args.labels)


def main(argv=None):
    try:
        summary = run(argv)
    except (CliError, ValueError, OSError, KeyError, FloatingPointError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"stae: error: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
