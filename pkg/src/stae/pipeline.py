"""Frame ingestion, preprocessing, temporal-stride volume construction and synthetic video.

Preprocessing runs in a fixed order: bilinear resize, scale to [0, 1],
subtract the training set's mean image, convert to grayscale (channel
average), then standardise with the training set's global pixel mean and
standard deviation.  Statistics are fitted on training data once and reused
verbatim at test time.
"""

import csv
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import VideoVolume

__all__ = [
    "FrameSequence",
    "PreprocessStats",
    "StrideSet",
    "SyntheticSpec",
    "resize_bilinear",
    "fit_preprocess",
    "apply_preprocess",
    "preprocess",
    "build_volumes",
    "volume_count",
    "generate_synthetic",
    "ingest",
    "write_frames",
    "read_labels",
    "write_labels",
]


@dataclass
class FrameSequence:
    frames: list
    fps: float = 25.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = [np.asarray(f) for f in self.frames]
        if self.frames:
            shape = self.frames[0].shape
            for k, f in enumerate(self.frames):
                if f.shape != shape:
                    raise ValueError(f"frame {k + 1} has shape {f.shape}, expected {shape}")

    def __len__(self):
        return len(self.frames)

    def as_array(self):
        return np.stack(self.frames)


@dataclass
class PreprocessStats:
    """Training-set statistics: the mean image (per channel) and the post-grayscale mean/std."""

    mean_image: np.ndarray
    mean: float
    std: float
    size: int = 227

    def to_arrays(self):
        return {"stats.mean_image": self.mean_image}

    def to_meta(self):
        return {"mean": self.mean, "std": self.std, "size": self.size}

    @classmethod
    def from_checkpoint(cls, arrays, meta):
        return cls(arrays["stats.mean_image"], meta["mean"], meta["std"], meta["size"])


@dataclass
class StrideSet:
    strides: tuple = (1, 2, 3)
    T: int = 10

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if not self.strides or any(s < 1 for s in self.strides):
            raise ValueError(f"strides must be a non-empty set of positive ints, got {self.strides}")
        if len(set(self.strides)) != len(self.strides):
            raise ValueError(f"strides must be distinct, got {self.strides}")
        if self.T < 1:
            raise ValueError("T must be >= 1")


# ---------------------------------------------------------------------------
# preprocessing


def _interp_matrix(n_in, n_out):
    """Row-stochastic matrix for half-pixel-centred linear interpolation."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    M = np.zeros((n_out, n_in))
    M[np.arange(n_out), lo] += 1.0 - w
    M[np.arange(n_out), hi] += w
    return M


def resize_bilinear(frame, size):
    """Bilinear resize of a ``[H, W]`` or ``[H, W, C]`` array to ``size x size``."""
    frame = np.asarray(frame, dtype=np.float64)
    Rh = _interp_matrix(frame.shape[0], size)
    Rw = _interp_matrix(frame.shape[1], size)
    if frame.ndim == 2:
        return Rh @ frame @ Rw.T
    return np.einsum("ih,hwc,jw->ijc", Rh, frame, Rw)


def _scaled(frame):
    frame = np.asarray(frame)
    if np.issubdtype(frame.dtype, np.integer):
        return frame.astype(np.float64) / np.iinfo(frame.dtype).max
    return frame.astype(np.float64)


def _resized_scaled(seq, size):
    frames = seq.frames if isinstance(seq, FrameSequence) else list(seq)
    if not frames:
        raise ValueError("empty frame sequence")
    out = []
    for f in frames:
        f = resize_bilinear(_scaled(f), size)
        if not np.all(np.isfinite(f)):
            raise ValueError("frames contain non-finite intensities")
        out.append(f if f.ndim == 3 else f[..., None])
    return np.stack(out)


def fit_preprocess(sequences, size=227):
    """Fit :class:`PreprocessStats` on one or more training sequences."""
    if isinstance(sequences, FrameSequence):
        sequences = [sequences]
    resized = [_resized_scaled(s, size) for s in sequences]
    if len({r.shape[-1] for r in resized}) != 1:
        raise ValueError("training sequences disagree on channel count")
    count = sum(len(r) for r in resized)
    mean_image = sum(r.sum(axis=0) for r in resized) / count
    grays = [(r - mean_image).mean(axis=-1) for r in resized]
    mean = sum(float(g.sum()) for g in grays) / sum(g.size for g in grays)
    var = sum(float(((g - mean) ** 2).sum()) for g in grays) / sum(g.size for g in grays)
    if not var > 1e-20:
        raise ValueError("training frames have zero variance after mean-image subtraction (constant video?)")
    return PreprocessStats(mean_image, mean, float(np.sqrt(var)), size)


def apply_preprocess(seq, stats):
    """Preprocess with fixed statistics; returns a float ``[N, size, size]`` array."""
    r = _resized_scaled(seq, stats.size)
    if r.shape[-1] != stats.mean_image.shape[-1]:
        raise ValueError(
            f"frames have {r.shape[-1]} channels but statistics were fitted on {stats.mean_image.shape[-1]}"
        )
    gray = (r - stats.mean_image).mean(axis=-1)
    return (gray - stats.mean) / stats.std


def preprocess(raw, stats=None, size=227):
    """Run the full chain; fits statistics on ``raw`` when none are given.

    Returns ``(FrameSequence of standardized frames, stats)``.
    """
    if stats is None:
        stats = fit_preprocess(raw, size)
    out = apply_preprocess(raw, stats)
    fps = raw.fps if isinstance(raw, FrameSequence) else 25.0
    sid = raw.source_id if isinstance(raw, FrameSequence) else ""
    return FrameSequence(list(out), fps, sid), stats


# ---------------------------------------------------------------------------
# volumes


def volume_count(n_frames, stride, T=10):
    return max(0, n_frames - (T - 1) * stride)


def build_volumes(frames, strideset=None):
    """Cut every ``T``-frame volume at each stride; source indices are 1-based."""
    strideset = strideset or StrideSet()
    arr = frames.as_array() if isinstance(frames, FrameSequence) else np.asarray(frames)
    N, T = len(arr), strideset.T
    if N < T:
        raise ValueError(f"need at least {T} frames to build a volume, got {N}")
    arr = np.asarray(arr, dtype=np.float64)
    volumes = []
    for s in strideset.strides:
        for start in range(volume_count(N, s, T)):
            idx = start + s * np.arange(T)
            volumes.append(VideoVolume(arr[idx][:, None], tuple(int(i) + 1 for i in idx)))
    return volumes


# ---------------------------------------------------------------------------
# synthetic video


@dataclass
class SyntheticSpec:
    """A scene of soft sprites drifting rightwards at constant speed over a static backdrop.

    Every sprite keeps its own horizontal lane, so normal sprites never
    collide, and wraps around the frame edges.  Each frame integrates the
    sprite over the exposure interval with a decaying trail, so the rendered
    streak encodes both speed and direction.  Inside an anomaly window the
    first ``anomalous_sprites`` sprites speed up by ``fast_factor``
    (``"fast"``), reverse (``"reversed"``) or change shape (``"shape"``).
    Windows are 1-based inclusive frame ranges of the test video.
    """

    frame_size: int = 32
    n_train_frames: int = 600
    n_test_frames: int = 450
    n_sprites: int = 2
    sprite_radius: float = 2.5
    speed_range: tuple = (1.0, 1.5)
    anomaly_windows: tuple = ((80, 120), (200, 240), (330, 370))
    anomaly_type: object = ("fast", "reversed", "fast")
    anomalous_sprites: int = 2
    fast_factor: float = 4.0
    trail_samples: int = 6
    trail_decay: float = 0.7
    noise_std: float = 0.02
    fps: float = 25.0

    def window_types(self):
        kinds = self.anomaly_type
        if isinstance(kinds, str):
            kinds = [kinds] * len(self.anomaly_windows)
        kinds = list(kinds)
        if len(kinds) != len(self.anomaly_windows):
            raise ValueError("anomaly_type must be a string or one entry per anomaly window")
        for k in kinds:
            if k not in ("fast", "reversed", "shape"):
                raise ValueError(f"unknown anomaly type {k!r}")
        return kinds


def _backdrop(rng, n):
    yy, xx = np.mgrid[0:n, 0:n] / n
    phase = rng.uniform(0, 2 * np.pi, size=2)
    return 0.25 + 0.1 * np.sin(2 * np.pi * xx + phase[0]) * np.cos(2 * np.pi * yy + phase[1])


def _render_sprite(canvas, cx, cy, radius, shape, weight):
    n = canvas.shape[0]
    yy, xx = np.mgrid[0:n, 0:n]
    # shortest displacement on the torus
    dx = (xx - cx + n / 2) % n - n / 2
    dy = (yy - cy + n / 2) % n - n / 2
    if shape == "disk":
        cover = np.clip(radius - np.hypot(dx, dy) + 0.5, 0.0, 1.0)
    else:  # a hollow square ring, never seen during training
        d = np.maximum(np.abs(dx), np.abs(dy))
        cover = np.clip(1.0 - np.abs(d - radius) + 0.5, 0.0, 1.0)
    np.maximum(canvas, weight * cover, out=canvas)


def _simulate(spec, n_frames, rng, backdrop, windows=(), kinds=()):
    n = spec.frame_size
    lanes = (np.arange(spec.n_sprites) + 0.5) * n / spec.n_sprites
    pos = np.stack([rng.uniform(0, n, size=spec.n_sprites), lanes], axis=1)
    speed = rng.uniform(*spec.speed_range, size=spec.n_sprites)
    vel = np.stack([speed, np.zeros(spec.n_sprites)], axis=1)

    frames = []
    for t in range(1, n_frames + 1):
        kind = None
        for (lo, hi), k in zip(windows, kinds):
            if lo <= t <= hi:
                kind = k
        v = vel.copy()
        shapes = ["disk"] * spec.n_sprites
        a = min(spec.anomalous_sprites, spec.n_sprites)
        if kind == "fast":
            v[:a] *= spec.fast_factor
        elif kind == "reversed":
            v[:a] *= -1.0
        elif kind == "shape":
            shapes[:a] = ["ring"] * a
        pos = (pos + v) % n

        sprites = np.zeros((n, n))
        for s in range(spec.n_sprites):
            for k in range(spec.trail_samples):
                back = k / spec.trail_samples
                cx, cy = pos[s] - back * v[s]
                _render_sprite(sprites, cx, cy, spec.sprite_radius, shapes[s], spec.trail_decay ** k)
        img = np.maximum(backdrop, 0.2 + 0.75 * sprites) if sprites.any() else backdrop.copy()
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        frames.append(np.clip(np.round(img * 255), 0, 255).astype(np.uint8))
    return frames


def generate_synthetic(spec=None, seed=0):
    """Render a normal-only training video and a test video with labelled anomaly windows.

    Returns ``(train, test, labels)`` where ``labels`` is a 0/1 int array over
    the test frames.
    """
    spec = spec or SyntheticSpec()
    kinds = spec.window_types()
    windows = [tuple(int(v) for v in w) for w in spec.anomaly_windows]
    for lo, hi in windows:
        if not 1 <= lo <= hi <= spec.n_test_frames:
            raise ValueError(f"anomaly window [{lo}, {hi}] lies outside the test video of {spec.n_test_frames} frames")
    rng = np.random.default_rng(seed)
    backdrop = _backdrop(rng, spec.frame_size)
    train = _simulate(spec, spec.n_train_frames, np.random.default_rng(rng.integers(2**63)), backdrop)
    test = _simulate(
        spec, spec.n_test_frames, np.random.default_rng(rng.integers(2**63)), backdrop, windows, kinds
    )
    labels = np.zeros(spec.n_test_frames, dtype=int)
    for lo, hi in windows:
        labels[lo - 1 : hi] = 1
    return (
        FrameSequence(train, spec.fps, "train"),
        FrameSequence(test, spec.fps, "test"),
        labels,
    )


# ---------------------------------------------------------------------------
# frame files

_FRAME_RE = re.compile(r"^(\d+)\.pgm$")
_RAW_MAGIC = b"STAERAW1"


def _read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    body = data[pos + 1 :]
    img = np.frombuffer(body, dtype=dtype, count=w * h)
    if img.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {img.size}")
    return img.reshape(h, w).astype(np.uint8 if maxval < 256 else np.uint16)


def _write_pgm(path, frame):
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError("PGM frames must be 2D grayscale")
    if frame.dtype == np.uint8:
        body, maxval = frame.tobytes(), 255
    elif frame.dtype == np.uint16:
        body, maxval = frame.astype(">u2").tobytes(), 65535
    else:
        raise ValueError(f"PGM frames must be uint8 or uint16, got {frame.dtype}")
    h, w = frame.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + body)


def write_frames(path, seq, digits=6):
    """Write frames as ``000001.pgm, 000002.pgm, ...`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = seq.frames if isinstance(seq, FrameSequence) else seq
    for k, f in enumerate(frames, 1):
        _write_pgm(path / f"{k:0{digits}d}.pgm", f)


def write_raw(path, seq):
    """Single-file planar grayscale container: magic, ``<u4`` N, H, W, bytes-per-pixel, pixels."""
    arr = np.stack(seq.frames if isinstance(seq, FrameSequence) else seq)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValueError("raw frames must be uint8 or uint16")
    n, h, w = arr.shape
    header = _RAW_MAGIC + struct.pack("<4I", n, h, w, arr.dtype.itemsize)
    Path(path).write_bytes(header + arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_raw(path):
    data = Path(path).read_bytes()
    if data[:8] != _RAW_MAGIC:
        raise ValueError(f"{path}: not a raw frame container")
    n, h, w, bpp = struct.unpack("<4I", data[8:24])
    dtype = {1: np.dtype("<u1"), 2: np.dtype("<u2")}.get(bpp)
    if dtype is None:
        raise ValueError(f"{path}: unsupported {bpp} bytes per pixel")
    arr = np.frombuffer(data[24:], dtype=dtype)
    if arr.size != n * h * w:
        raise ValueError(f"{path}: expected {n * h * w} pixels, found {arr.size}")
    return list(arr.reshape(n, h, w).astype(np.uint8 if bpp == 1 else np.uint16))


def ingest(path, fps=25.0):
    """Load a directory of numbered ``.pgm`` frames or a raw container file."""
    path = Path(path)
    if path.is_file():
        return FrameSequence(_read_raw(path), fps, path.stem)
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: no such frame directory or file")
    numbered = sorted(
        (int(m.group(1)), p) for p in path.iterdir() if (m := _FRAME_RE.match(p.name))
    )
    if not numbered:
        raise ValueError(f"{path}: no numbered .pgm frames found")
    idx = [i for i, _ in numbered]
    if len(set(idx)) != len(idx):
        raise ValueError(f"{path}: duplicate frame numbers")
    missing = sorted(set(range(idx[0], idx[-1] + 1)) - set(idx))
    if missing:
        warnings.warn(f"{path}: {len(missing)} missing frame numbers, first is {missing[0]}")
    frames, shape = [], None
    for i, p in numbered:
        try:
            f = _read_pgm(p)
        except (OSError, ValueError) as e:
            raise ValueError(f"unreadable frame {p}: {e}") from e
        if shape is None:
            shape = f.shape
        elif f.shape != shape:
            raise ValueError(f"{p}: frame size {f.shape} differs from {shape} of the first frame")
        frames.append(f)
    return FrameSequence(frames, fps, path.name)


def write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "label"])
        for k, v in enumerate(labels, 1):
            w.writerow([k, int(v)])


def read_labels(path):
    """Returns ``(frame_indices, labels)`` int arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"frame_index", "label"}:
        raise ValueError(f"{path}: expected columns frame_index,label")
    idx = np.array([int(r["frame_index"]) for r in rows])
    lab = np.array([int(r["label"]) for r in rows])
    if not set(np.unique(lab)) <= {0, 1}:
        raise ValueError(f"{path}: labels must be 0/1")
    return idx, lab
