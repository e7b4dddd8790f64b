"""
Regularity scores, event detection and ROC
==========================================

Per-frame reconstruction errors become an abnormality score in [0, 1] and
its complement, the regularity score.  Dips in regularity are found with a
persistence filter that ignores shallow wiggles, nearby dips are merged into
one event, and the result is compared with ground truth.
"""

import numpy as np

from stae.scoring import (
    count_events,
    detect_events,
    frame_errors,
    minima_persistence,
    regularity,
    roc_auc_eer,
    truth_intervals,
)

rng = np.random.default_rng(0)

# per-frame errors average every 10-frame window that covers the frame;
# a "model" that adds a constant offset d to a 32x32 frame has error 32*d
frames = rng.normal(size=(30, 32, 32))
print("offset stub error:", frame_errors(lambda batch: batch + 0.05, frames)[:3])

# a synthetic error curve: noisy baseline plus two bursts
n = 400
e = 5.0 + 0.2 * rng.normal(size=n)
e[100:130] += np.hanning(30) * 4.0
e[250:280] += np.hanning(30) * 3.0
labels = np.zeros(n, dtype=int)
labels[100:130] = 1
labels[250:280] = 1

series = regularity(e)
print("s_a range", series.s_a.min(), round(series.s_a.max(), 3))

# persistence measures how deep each local minimum is relative to its
# shallower neighbour; most noise dips die almost immediately
pers = minima_persistence(series.s_r)
deep = sorted(pers.items(), key=lambda kv: -kv[1])[:4]
print("four most persistent minima (frame index from 0):", [(i, round(p, 3)) for i, p in deep])

events = detect_events(series, window=50, persistence_threshold=0.1)
for g in events:
    print(f"event at frame {g.representative}, spans {g.start}-{g.end}, min s_r {g.min_regularity:.3f}")

# a noise dip can still clear the threshold; it counts as a false alarm
hits, false_alarms, missed = count_events(events, truth_intervals(labels))
print("true detections", hits, "false alarms", false_alarms, "missed", missed)

roc = roc_auc_eer(series.s_a, labels)
print(f"AUC {roc.auc:.3f}  EER {roc.eer:.3f}")
