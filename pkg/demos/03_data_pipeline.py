"""
From raw frames to training volumes
===================================

Frames are resized, scaled to [0, 1], centred on the training mean image,
reduced to one channel and standardised.  Training clips are then cut into
overlapping 10-frame volumes at several temporal strides, which is how the
training set gets augmented.
"""

import tempfile
from pathlib import Path

import numpy as np

from stae.pipeline import (
    StrideSet,
    SyntheticSpec,
    build_volumes,
    generate_synthetic,
    ingest,
    preprocess,
    volume_count,
    write_frames,
)

# a short synthetic scene: sprites drifting along lanes, two labelled anomalies
spec = SyntheticSpec(n_train_frames=120, n_test_frames=150, anomaly_windows=((40, 60), (100, 120)), anomaly_type="fast")
train, test, labels = generate_synthetic(spec, seed=0)
print("train frames", len(train), train.frames[0].shape, train.frames[0].dtype)
print("anomalous test frames", labels.sum(), "of", len(labels))

# frames round-trip through a directory of PGM files
with tempfile.TemporaryDirectory() as tmp:
    write_frames(Path(tmp) / "clip", train)
    again = ingest(Path(tmp) / "clip")
    print("re-read identical:", all(np.array_equal(a, b) for a, b in zip(train.frames, again.frames)))

# statistics come from training data only and are reused on the test clip
x_train, stats = preprocess(train, size=32)
x_test, _ = preprocess(test, stats)
print("train mean/std after standardising", round(x_train.as_array().mean(), 6), round(x_train.as_array().std(), 6))
print("test mean/std with training stats ", round(x_test.as_array().mean(), 3), round(x_test.as_array().std(), 3))

# 120 frames give 111, 102 and 93 volumes at strides 1, 2 and 3
for s in (1, 2, 3):
    print("stride", s, "->", volume_count(len(train), s))
vols = build_volumes(x_train, StrideSet((1, 2, 3)))
print("total volumes", len(vols), "shape", vols[0].frames.shape)
print("first", vols[0].source_indices)
print("last ", vols[-1].source_indices)
