"""
Training a small spatiotemporal autoencoder
===========================================

The full model expects 227x227 frames; for a quick run we shrink every layer.
The autoencoder is trained on normal footage only, with Adam on the mean
squared reconstruction error and early stopping on a held-out tail of the
volumes.
"""

import tempfile
from pathlib import Path

import numpy as np

from stae.model import ModelConfig, build, forward, load_checkpoint, save_checkpoint, size_trace
from stae.optim import TrainSettings, train
from stae.pipeline import StrideSet, SyntheticSpec, build_volumes, generate_synthetic, preprocess

spec = SyntheticSpec(frame_size=16, n_train_frames=80, n_test_frames=40, anomaly_windows=((10, 20),), anomaly_type="fast")
train_seq, _, _ = generate_synthetic(spec, seed=0)
frames, stats = preprocess(train_seq, size=16)
vols = build_volumes(frames, StrideSet((1, 2)))

# two strided convolutions, three ConvLSTM layers, mirrored decoder
config = ModelConfig(
    frame_size=16,
    time_steps=10,
    encoder=[(4, 4, 2, 1), (4, 4, 2, 1)],
    lstm_filters=(4, 4, 4),
    output_activation="linear",
    seed=0,
)
for name, n_in, n_out in size_trace(config):
    print(f"{name:>10}: {n_in} -> {n_out}")

model = build(config)
print("parameters", sum(p.size for p in model.params.values()))

settings = TrainSettings(batch_size=8, max_epochs=8, patience=3, seed=0)
result = train(model, vols, settings, log=lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.4f}  val {r.val_loss:.4f}"))
print("best epoch", result.best_epoch, "stopped early:", result.stopped_early)

# checkpoints are byte-stable: saving what was loaded reproduces the file
with tempfile.TemporaryDirectory() as tmp:
    a, b = Path(tmp) / "a.npz", Path(tmp) / "b.npz"
    save_checkpoint(a, model, {"stats.mean_image": stats.mean_image})
    loaded, arrays, _ = load_checkpoint(a)
    save_checkpoint(b, loaded, arrays)
    print("byte-identical round trip:", a.read_bytes() == b.read_bytes())
    print("same reconstruction:", np.array_equal(forward(model, vols[0]).frames, forward(loaded, vols[0]).frames))
