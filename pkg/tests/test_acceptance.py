"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.  The end-to-end
detection run (criterion 7) trains a small model from scratch and takes
several minutes on one CPU core.
"""

import time

import numpy as np
import pytest

from stae import cli
from stae.model import ModelConfig, backward, build, load_checkpoint, reconstruction_loss, save_checkpoint, size_trace
from stae.optim import EarlyStopping, TrainSettings, train
from stae.pipeline import StrideSet, SyntheticSpec, build_volumes, generate_synthetic, preprocess
from stae.recurrent import (
    LSTMState,
    conv_lstm_sequence,
    conv_lstm_sequence_backward,
    conv_lstm_step,
    fc_lstm_sequence,
    fc_lstm_sequence_backward,
    fc_lstm_step,
    init_conv_lstm,
    init_fc_lstm,
)
from stae.scoring import (
    count_events,
    detect_events,
    frame_errors,
    regularity,
    roc_auc_eer,
    truth_intervals,
)
from stae.tensor import conv2d, conv2d_backward, conv_output_size, deconv2d, deconv2d_backward

from oracles import auc_pairwise, group_brute, max_rel_err, numeric_grad

# Desk-scale end-to-end scenario: sprites rendered natively at the model's
# 32x32 resolution; in each window both sprites speed up 4x or reverse.
E2E_SCENE = SyntheticSpec(
    frame_size=32,
    n_train_frames=600,
    n_test_frames=450,
    sprite_radius=2.5,
    speed_range=(1.0, 1.5),
    anomaly_windows=((80, 120), (200, 240), (330, 370)),
    anomaly_type=("fast", "reversed", "fast"),
    anomalous_sprites=2,
    fast_factor=4.0,
)
E2E_MODEL = ModelConfig(
    frame_size=32,
    time_steps=10,
    encoder=[(8, 4, 2, 1), (8, 4, 2, 1)],
    lstm_filters=(8, 4, 8),
    output_activation="linear",
    seed=0,
)
E2E_TRAIN = TrainSettings(batch_size=8, max_epochs=20, patience=10, seed=0)


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title} ({detail})")
    assert ok, detail


def _randomize(params, rng, scale=0.5):
    for _, v in params.items():
        v[...] = rng.normal(scale=scale, size=v.shape)
    return params


def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_layer = 0.0

    for n, m, s, p in [(5, 3, 1, 0), (7, 3, 2, 1), (8, 4, 2, 1)]:
        x = rng.normal(size=(2, 2, n, n))
        W = rng.normal(size=(3, 2, m, m))
        g = rng.normal(size=conv2d(x, W, None, s, p).shape)
        f = lambda: float(np.sum(g * conv2d(x, W, None, s, p)))  # noqa: E731
        gi, gw, _ = conv2d_backward(g, x, W, s, p)
        worst_layer = max(worst_layer, max_rel_err(gi, numeric_grad(f, x)), max_rel_err(gw, numeric_grad(f, W)))

        xd = rng.normal(size=(2, 3, n - 2, n - 2))
        gd = rng.normal(size=deconv2d(xd, W, None, s, p).shape)
        f = lambda: float(np.sum(gd * deconv2d(xd, W, None, s, p)))  # noqa: E731
        gi, gw, _ = deconv2d_backward(gd, xd, W, s, p)
        worst_layer = max(worst_layer, max_rel_err(gi, numeric_grad(f, xd)), max_rel_err(gw, numeric_grad(f, W)))

    for T in (1, 2, 3):
        p = _randomize(init_fc_lstm(rng, 3, 4), rng)
        xs = rng.normal(size=(T, 3))
        g = rng.normal(size=(T, 4))
        f = lambda: float(np.sum(g * fc_lstm_sequence(xs, p)))  # noqa: E731
        _, caches = fc_lstm_sequence(xs, p, return_cache=True)
        dxs, grads = fc_lstm_sequence_backward(g, caches, p)
        worst_layer = max(worst_layer, max_rel_err(dxs, numeric_grad(f, xs)))
        for name, v in p.items():
            worst_layer = max(worst_layer, max_rel_err(getattr(grads, name), numeric_grad(f, v)))

        layers = [(_randomize(init_conv_lstm(rng, 2, 2, 3, "concat"), rng), "concat")]
        xc = rng.normal(size=(T, 1, 2, 4, 4))
        gc = rng.normal(size=(T, 1, 2, 4, 4))
        f = lambda: float(np.sum(gc * conv_lstm_sequence(xc, layers)))  # noqa: E731
        _, cache = conv_lstm_sequence(xc, layers, return_cache=True)
        dxc, cgrads = conv_lstm_sequence_backward(gc, cache)
        worst_layer = max(worst_layer, max_rel_err(dxc, numeric_grad(f, xc)))
        for name, v in layers[0][0].items():
            worst_layer = max(worst_layer, max_rel_err(getattr(cgrads[0], name), numeric_grad(f, v)))

    tiny = ModelConfig(frame_size=16, time_steps=3, encoder=[(2, 4, 2, 1), (2, 4, 2, 1)], lstm_filters=(2, 2, 2), seed=1)
    model = build(tiny)
    x = rng.normal(size=(3, 1, 16, 16))
    grads = backward(model, x)
    f = lambda: reconstruction_loss(model.forward(x), x)  # noqa: E731
    worst_model = max(max_rel_err(grads[k], numeric_grad(f, v, 1e-4)) for k, v in model.params.items())
    elapsed = time.perf_counter() - t0
    ok = worst_layer <= 1e-4 and worst_model <= 1e-3 and elapsed < 60
    report(
        capsys, 1, "gradient fidelity", ok,
        f"layers/cells max rel err {worst_layer:.2e} <= 1e-4, full model {worst_model:.2e} <= 1e-3, {elapsed:.1f}s < 60s",
    )


def test_criterion_2_size_laws(capsys):
    rng = np.random.default_rng(2)
    cases = [(227, 11)] + [(int(n), int(rng.integers(1, n + 1))) for n in rng.integers(1, 40, size=999)]
    bad = []
    for n, m in cases:
        shape = conv2d(np.zeros((1, n, n)), np.zeros((1, 1, m, m))).shape
        if shape != (1, n - m + 1, n - m + 1) or conv_output_size(n, m) != n - m + 1:
            bad.append((n, m))
    trace = size_trace(ModelConfig())
    x = np.zeros((1, 64, 26, 26))
    h = deconv2d(x, np.zeros((64, 128, 5, 5)), None, 2)
    out = deconv2d(h, np.zeros((128, 1, 11, 11)), None, 4)
    chain_ok = [r[2] for r in trace] == [55, 26, 26, 26, 26, 55, 227] and h.shape[-1] == 55 and out.shape[-1] == 227
    ok = not bad and chain_ok
    report(
        capsys, 2, "size laws", ok,
        f"{len(cases) - len(bad)}/{len(cases)} stride-1 cases give n-m+1 incl. 227/11->217; default chain 227->55->26->55->227: {chain_ok}",
    )


def test_criterion_3_cell_correctness(capsys):
    rng = np.random.default_rng(3)
    p = _randomize(init_conv_lstm(rng, 3, 4, 1, peephole="none"), rng)
    xs = rng.normal(size=(5, 3, 6, 6))
    conv = conv_lstm_sequence(xs, [(p, "none")])
    # a 1x1 kernel over [h, x] channels is exactly the dense [h, x] weight matrix
    fcp = init_fc_lstm(rng, 3, 4)
    for g in "fiCo":
        getattr(fcp, f"W_{g}")[...] = getattr(p, f"W_{g}")[:, :, 0, 0]
        getattr(fcp, f"b_{g}")[...] = getattr(p, f"b_{g}")
    worst = 0.0
    for r in range(6):
        for c in range(6):
            worst = max(worst, float(np.max(np.abs(fc_lstm_sequence(xs[:, :, r, c], fcp) - conv[:, :, r, c]))))

    exact = True
    zp = init_fc_lstm(rng, 2, 3)
    for _, v in zp.items():
        v[...] = 0.0
    C = rng.normal(size=3)
    st = fc_lstm_step(rng.normal(size=2), LSTMState(np.zeros(3), C), zp)
    exact &= np.array_equal(st.C, 0.5 * C) and np.array_equal(st.h, 0.5 * np.tanh(0.5 * C))
    zc = init_conv_lstm(rng, 2, 3, 3, "concat")
    for _, v in zc.items():
        v[...] = 0.0
    C = rng.normal(size=(3, 4, 4))
    st = conv_lstm_step(rng.normal(size=(2, 4, 4)), LSTMState(np.zeros((3, 4, 4)), C), zc)
    exact &= np.array_equal(st.C, 0.5 * C) and np.array_equal(st.h, 0.5 * np.tanh(0.5 * C))
    ok = worst <= 1e-12 and exact
    report(capsys, 3, "cell correctness", ok, f"1x1 ConvLSTM vs pixelwise FC-LSTM max diff {worst:.1e} <= 1e-12; zero-param closed forms exact: {exact}")


def test_criterion_4_scoring_identities(capsys):
    r = regularity([2.0, 4.0, 10.0])
    example = np.allclose(r.s_a, [0, 0.2, 0.8], rtol=0, atol=1e-15)
    rng = np.random.default_rng(4)
    identity = ordering = True
    for _ in range(1000):
        e = rng.exponential(size=rng.integers(2, 80)) + rng.uniform(0, 2)
        a, b = regularity(e), regularity(e, "minmax")
        identity &= bool(np.all(a.s_r + a.s_a == 1.0))
        ordering &= bool(np.array_equal(np.argsort(a.s_a, kind="stable"), np.argsort(b.s_a, kind="stable")))
    ok = example and identity and ordering
    report(capsys, 4, "scoring identities", ok, f"[2,4,10]->[0,.2,.8]: {example}; s_r+s_a==1: {identity}; ordering invariant on 1000 series: {ordering}")


def test_criterion_5_oracle_equivalence(capsys):
    rng = np.random.default_rng(5)
    grouping_bad = 0
    for _ in range(500):
        n = int(rng.integers(3, 201))
        s = np.cumsum(rng.normal(size=n))
        s = (s - s.min()) / (np.ptp(s) or 1.0)
        got = [(g.representative, g.members) for g in detect_events(s, 50, 0.1)]
        grouping_bad += got != group_brute(s, 50, 0.1)
    auc_err = eer_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 501))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.random(n) + 0.3 * labels
        roc = roc_auc_eer(scores, labels)
        auc_err = max(auc_err, abs(roc.auc - auc_pairwise(scores, labels)))
        eer_err = max(eer_err, abs(roc.eer - (1 - roc.eer_tpr)))
    ok = grouping_bad == 0 and auc_err <= 1e-9 and eer_err <= 1e-9
    report(
        capsys, 5, "oracle equivalence", ok,
        f"grouping mismatches {grouping_bad}/500; AUC vs pairwise max err {auc_err:.1e}; EER |FPR-(1-TPR)| max {eer_err:.1e}",
    )


def test_criterion_6_training_smoke(capsys):
    scene = SyntheticSpec(frame_size=16, n_train_frames=109, n_test_frames=20, sprite_radius=2.0,
                          speed_range=(0.5, 0.8), anomaly_windows=((5, 6),), anomaly_type="fast")
    raw, _, _ = generate_synthetic(scene, seed=6)
    frames, _ = preprocess(raw, size=16)
    vols = build_volumes(frames, StrideSet((1,)))
    cfg = ModelConfig(frame_size=16, encoder=[(4, 4, 2, 1), (4, 4, 2, 1)], lstm_filters=(4, 4, 4),
                      output_activation="linear", seed=0)
    res = train(build(cfg), vols[:90], TrainSettings(batch_size=8, max_epochs=50, patience=50), val_volumes=vols[90:])
    final = res.history[-1].train_loss
    smoke = final < 0.5 * res.initial_train_loss

    es = EarlyStopping(patience=4)
    script = [1.0, 0.9, 0.9, 0.95, 0.91, 0.92, 0.5]
    stopped_at = next(epoch for epoch, loss in enumerate(script, 1) if (es.update(epoch, loss), es.should_stop)[1])
    ok = len(vols) == 100 and smoke and stopped_at == 2 + 4
    report(
        capsys, 6, "training smoke", ok,
        f"{len(vols)} volumes, loss {res.initial_train_loss:.3f} -> {final:.3f} in {len(res.history)} epochs; "
        f"plateau stop at epoch {stopped_at} (best 2 + patience 4)",
    )


def test_criterion_7_end_to_end_detection(capsys):
    t0 = time.perf_counter()
    train_raw, test_raw, labels = generate_synthetic(E2E_SCENE, seed=0)
    train_frames, stats = preprocess(train_raw, size=E2E_MODEL.frame_size)
    test_frames, _ = preprocess(test_raw, stats)
    vols = build_volumes(train_frames, StrideSet((1, 2, 3), E2E_MODEL.time_steps))
    model = build(E2E_MODEL)
    train(model, vols, E2E_TRAIN)
    e = frame_errors(model, test_frames.as_array(), E2E_MODEL.time_steps)
    series = regularity(e)
    roc = roc_auc_eer(series.s_a, labels)
    events = detect_events(series, window=50, persistence_threshold=0.1)
    hits, false_alarms, missed = count_events(events, truth_intervals(labels))
    elapsed = time.perf_counter() - t0
    ok = roc.auc >= 0.85 and missed == 0 and false_alarms <= 2 and elapsed <= 1800
    report(
        capsys, 7, "end-to-end desk-scale detection", ok,
        f"AUC {roc.auc:.3f} >= 0.85, EER {roc.eer:.3f}, windows detected {hits}/3, false alarms {false_alarms} <= 2, "
        f"events at {[g.representative for g in events]}, {elapsed / 60:.1f} min <= 30",
    )


def test_criterion_8_determinism_and_persistence(capsys, tmp_path):
    cfg = {
        "synthetic": {"frame_size": 24, "n_train_frames": 40, "n_test_frames": 60,
                      "anomaly_windows": [[20, 30]], "anomaly_type": "reversed"},
        "model": {"frame_size": 16, "time_steps": 4, "encoder": [[3, 4, 2, 1], [3, 4, 2, 1]], "lstm_filters": [3, 3, 3]},
        "train": {"batch_size": 8, "max_epochs": 2},
        "volumes": {"strides": [1, 2]},
    }
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(__import__("json").dumps(cfg))
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        assert cli.main(["synth", "--config", str(cfg_file), "--out", str(root / "syn")]) == 0
        assert cli.main(["train", str(root / "syn"), "--config", str(cfg_file), "--out", str(root / "tr")]) == 0
        assert cli.main(["score", str(root / "tr" / "checkpoint.npz"), str(root / "syn"), "--config", str(cfg_file),
                         "--out", str(root / "sc")]) == 0
        outs.append(((root / "tr" / "checkpoint.npz").read_bytes(), (root / "sc" / "scores" / "video_001.csv").read_bytes()))
    same = outs[0] == outs[1]
    model, arrays, meta = load_checkpoint(tmp_path / "a" / "tr" / "checkpoint.npz")
    save_checkpoint(tmp_path / "again.npz", model, arrays, meta)
    round_trip = (tmp_path / "again.npz").read_bytes() == outs[0][0]
    ok = same and round_trip
    report(capsys, 8, "determinism & persistence", ok, f"same seed -> identical checkpoint and score CSV: {same}; save->load->save byte-exact: {round_trip}")
