"""
The stae command line, end to end
=================================

Each stage of the workflow is a subcommand that reads the previous stage's
output directory: synth -> train -> score -> evaluate.  The same calls work
from a shell, e.g. ``stae synth --config run.json --out runs/syn``.  Here a
deliberately tiny configuration keeps the whole run under a minute.
"""

import json
import tempfile
from pathlib import Path

from stae.cli import main

config = {
    "seed": 0,
    "synthetic": {"frame_size": 24, "n_train_frames": 80, "n_test_frames": 90,
                  "anomaly_windows": [[20, 35], [60, 75]], "anomaly_type": "fast"},
    "model": {"frame_size": 16, "time_steps": 10, "encoder": [[4, 4, 2, 1], [4, 4, 2, 1]],
              "lstm_filters": [4, 4, 4], "output_activation": "linear"},
    "train": {"batch_size": 8, "max_epochs": 10},
    "volumes": {"strides": [1, 2]},
}

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    cfg = root / "run.json"
    cfg.write_text(json.dumps(config))
    common = ["--config", str(cfg)]

    # each call prints a one-line JSON summary and returns 0 on success
    main(["synth", *common, "--out", str(root / "syn")])
    main(["train", str(root / "syn"), *common, "--out", str(root / "tr")])
    main(["score", str(root / "tr" / "checkpoint.npz"), str(root / "syn"), *common, "--out", str(root / "sc")])
    main(["evaluate", str(root / "sc"), *common, "--out", str(root / "ev")])

    print((root / "tr" / "history.csv").read_text())
    print((root / "ev" / "metrics.csv").read_text())

    # every stage leaves the fully resolved configuration next to its output
    resolved = json.loads((root / "tr" / "config.resolved.json").read_text())
    print("resolved scoring section:", resolved["scoring"])

    # mistakes are reported on one line and give a non-zero status
    print("exit status:", main(["train", str(root / "missing"), "--out", str(root / "x")]))
