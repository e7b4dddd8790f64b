"""Reconstruction-error scores, ROC/AUC/EER and persistence-grouped event detection."""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RegularitySeries",
    "EventGroup",
    "RocResult",
    "frame_errors",
    "regularity",
    "minima_persistence",
    "detect_events",
    "roc_auc_eer",
    "truth_intervals",
    "count_events",
    "write_scores",
    "read_scores",
    "write_events",
]


@dataclass
class RegularitySeries:
    e: np.ndarray
    s_a: np.ndarray
    s_r: np.ndarray
    frame_indices: np.ndarray


@dataclass
class EventGroup:
    representative: int
    members: list = field(default_factory=list)
    min_regularity: float = np.nan

    @property
    def start(self):
        return min(self.members)

    @property
    def end(self):
        return max(self.members)


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    eer: float
    eer_threshold: float
    eer_tpr: float


def frame_errors(model, frames, T=10, batch_size=16):
    """Per-frame Euclidean reconstruction error over all stride-1 windows.

    ``model`` is anything callable on a ``[B, T, 1, H, W]`` batch (a
    :class:`~stae.model.SpatioTemporalAE` is wrapped automatically).  Each
    frame's error is the mean of ``||x - f(x)||_2`` over the windows that
    contain it.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    N = len(x)
    if N < T:
        raise ValueError(f"sequence of {N} frames is shorter than the volume length {T}")
    fn = model.forward if hasattr(model, "forward") else model
    total = np.zeros(N)
    count = np.zeros(N)
    starts = np.arange(N - T + 1)
    for lo in range(0, len(starts), batch_size):
        st = starts[lo : lo + batch_size]
        batch = np.stack([x[s : s + T] for s in st])
        diff = np.asarray(fn(batch), dtype=np.float64) - batch
        err = np.sqrt(np.sum(diff.reshape(len(st), T, -1) ** 2, axis=-1))
        for row, s in enumerate(st):
            total[s : s + T] += err[row]
            count[s : s + T] += 1
    return total / count


def regularity(e, normalization="max", frame_indices=None):
    """Abnormality ``s_a = (e - e_min) / e_max`` and regularity ``s_r = 1 - s_a``.

    ``normalization="minmax"`` divides by ``e_max - e_min`` instead; the
    ordering of the scores is the same either way.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ValueError("error series must be a non-empty 1D array")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("reconstruction errors must be finite and non-negative")
    e_min, e_max = e.min(), e.max()
    if normalization == "max":
        denom = e_max
    elif normalization == "minmax":
        denom = e_max - e_min
    else:
        raise ValueError(f"normalization must be 'max' or 'minmax', got {normalization!r}")
    if denom <= 0:
        if e_max == 0:
            warnings.warn("all-zero reconstruction errors; abnormality defined as 0 everywhere")
        s_a = np.zeros_like(e)
    else:
        s_a = (e - e_min) / denom
    if frame_indices is None:
        frame_indices = np.arange(1, e.size + 1)
    return RegularitySeries(e, s_a, 1.0 - s_a, np.asarray(frame_indices))


def minima_persistence(values):
    """Interior local minima of ``values`` and their persistence.

    Sweeps sublevel sets in ascending (value, index) order with a union-find.
    A component is born at each local minimum; when two components meet at a
    vertex, the one with the higher minimum dies there with persistence
    ``value_at_merge - its_minimum``.  The global minimum is assigned the
    range of the series.  Endpoints are never reported.
    Returns ``{index: persistence}``.
    """
    y = np.asarray(values, dtype=np.float64)
    n = y.size
    order = np.argsort(y, kind="stable")
    parent = np.full(n, -1)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pers = {}
    for i in order:
        roots = {find(j) for j in (i - 1, i + 1) if 0 <= j < n and parent[j] != -1}
        if not roots:
            parent[i] = i
            continue
        # component roots are their minima, which arrive first in the sweep
        older, *rest = sorted(roots, key=lambda r: (y[r], r))
        for younger in rest:
            pers[younger] = y[i] - y[younger]
            parent[younger] = older
        parent[i] = older
    if n:
        g = int(order[0])
        pers[g] = y.max() - y[g]
    return {int(i): float(p) for i, p in pers.items() if 0 < i < n - 1}


def detect_events(series, window=50, persistence_threshold=0.1):
    """Group significant minima of the regularity curve into events.

    Minima whose persistence reaches ``persistence_threshold`` are visited from
    lowest regularity upwards; each joins the first existing event whose
    representative lies within ``window`` frames, or founds a new event.
    Frame numbers in the result come from ``series.frame_indices``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    s_r = series.s_r if isinstance(series, RegularitySeries) else np.asarray(series, dtype=np.float64)
    if isinstance(series, RegularitySeries):
        frames = np.asarray(series.frame_indices)
    else:
        frames = np.arange(1, s_r.size + 1)
    minima = [i for i, p in minima_persistence(s_r).items() if p >= persistence_threshold]
    minima.sort(key=lambda i: (s_r[i], i))
    groups = []
    for i in minima:
        f = int(frames[i])
        for g in groups:
            if abs(f - g.representative) <= window:
                g.members.append(f)
                break
        else:
            groups.append(EventGroup(f, [f], float(s_r[i])))
    for g in groups:
        g.members.sort()
    return sorted(groups, key=lambda g: g.representative)


def roc_auc_eer(scores, labels):
    """ROC by sweeping every distinct score as a threshold (``score >= thr`` is anomalous).

    AUC is the trapezoidal area; EER is where FPR equals the miss rate
    ``1 - TPR``, linearly interpolated between adjacent sweep points.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equally long 1D arrays")
    P = int(np.sum(labels == 1))
    N = int(np.sum(labels == 0))
    if P == 0 or N == 0 or P + N != labels.size:
        raise ValueError("labels must be 0/1 and contain both classes")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l == 1)
    fp = np.cumsum(l == 0)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tpr = np.r_[0.0, tp[last] / P]
    fpr = np.r_[0.0, fp[last] / N]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    gap = fpr - (1.0 - tpr)  # rises from -1 to +1 along the sweep
    k = int(np.flatnonzero(gap >= 0)[0])
    if gap[k] == 0:
        lam = 1.0
    else:
        lam = -gap[k - 1] / (gap[k] - gap[k - 1])
    eer_fpr = fpr[k - 1] + lam * (fpr[k] - fpr[k - 1])
    eer_tpr = tpr[k - 1] + lam * (tpr[k] - tpr[k - 1])
    if np.isfinite(thresholds[k - 1]):
        eer_thr = thresholds[k - 1] + lam * (thresholds[k] - thresholds[k - 1])
    else:
        eer_thr = thresholds[k]
    return RocResult(thresholds, tpr, fpr, auc, float(eer_fpr), float(eer_thr), float(eer_tpr))


def truth_intervals(labels, frame_indices=None):
    """Maximal runs of 1s as inclusive ``(first, last)`` frame-number pairs."""
    labels = np.asarray(labels).astype(int)
    if frame_indices is None:
        frame_indices = np.arange(1, labels.size + 1)
    padded = np.r_[0, labels, 0]
    starts = np.flatnonzero(np.diff(padded) == 1)
    ends = np.flatnonzero(np.diff(padded) == -1) - 1
    return [(int(frame_indices[a]), int(frame_indices[b])) for a, b in zip(starts, ends)]


def count_events(detected, intervals):
    """Match detections to ground-truth intervals.

    A detection hits an interval when its representative frame lies inside it;
    each interval is credited at most once (maximum bipartite matching).
    Detections outside every interval are false alarms.  Returns
    ``(true_detections, false_alarms, missed)``.
    """
    reps = [g.representative if isinstance(g, EventGroup) else int(g) for g in detected]
    intervals = [tuple(iv) for iv in intervals]
    for a, b in intervals:
        if a > b:
            raise ValueError(f"malformed interval ({a}, {b})")
    hits = [[j for j, (a, b) in enumerate(intervals) if a <= r <= b] for r in reps]
    owner = {}

    def augment(d, seen):
        for j in hits[d]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = d
                return True
        return False

    for d in range(len(reps)):
        augment(d, set())
    true_det = len(owner)
    false_alarms = sum(1 for h in hits if not h)
    return true_det, false_alarms, len(intervals) - true_det


# ---------------------------------------------------------------------------
# CSV surfaces


def write_scores(path, series, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "e", "s_a", "s_r", "label"])
        for k in range(series.e.size):
            lab = "" if labels is None else int(labels[k])
            w.writerow([int(series.frame_indices[k]), repr(float(series.e[k])),
                        repr(float(series.s_a[k])), repr(float(series.s_r[k])), lab])


def read_scores(path):
    """Returns ``(RegularitySeries, labels or None)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty score file")
    need = {"frame_index", "e", "s_a", "s_r"}
    if not need <= set(rows[0]):
        raise ValueError(f"{path}: missing columns {sorted(need - set(rows[0]))}")
    col = lambda k, t=float: np.array([t(r[k]) for r in rows])  # noqa: E731
    series = RegularitySeries(col("e"), col("s_a"), col("s_r"), col("frame_index", int))
    raw = [r.get("label", "") for r in rows]
    labels = None if any(v in ("", None) for v in raw) else np.array([int(v) for v in raw])
    return series, labels


def write_events(path, events):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["representative_frame", "start", "end", "min_regularity"])
        for g in events:
            w.writerow([g.representative, g.start, g.end, repr(float(g.min_regularity))])
