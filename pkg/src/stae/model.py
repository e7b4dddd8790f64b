"""The spatiotemporal autoencoder: per-frame conv encoder, ConvLSTM stack, mirrored deconv decoder."""

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .recurrent import (
    PEEPHOLE_MODES,
    LSTMParams,
    conv_lstm_sequence,
    conv_lstm_sequence_backward,
    init_conv_lstm,
)
from .tensor import ShapeError

__all__ = [
    "LayerSpec",
    "ModelConfig",
    "VideoVolume",
    "SpatioTemporalAE",
    "ConfigError",
    "build",
    "forward",
    "backward",
    "reconstruction_loss",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One spatial (de)convolution layer: output channels and square geometry."""

    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0


def _layers(specs):
    return tuple(s if isinstance(s, LayerSpec) else LayerSpec(**s) if isinstance(s, dict) else LayerSpec(*s) for s in specs)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The defaults are a reconstruction of the published layer diagram:
    227 -> 55 (11x11/4, 128 filters) -> 26 (5x5/2, 64 filters), three 3x3
    ConvLSTM layers with 64, 32, 64 filters, and a decoder that mirrors the
    encoder back to 227.  ``decoder=None`` derives the mirror automatically.
    """

    frame_size: int = 227
    time_steps: int = 10
    encoder: tuple = (LayerSpec(128, 11, 4, 0), LayerSpec(64, 5, 2, 0))
    lstm_filters: tuple = (64, 32, 64)
    lstm_kernels: tuple = (3, 3, 3)
    peephole: str = "concat"
    activation: str = "tanh"
    output_activation: str = "tanh"
    decoder: tuple = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder", _layers(self.encoder))
        object.__setattr__(self, "lstm_filters", tuple(int(f) for f in self.lstm_filters))
        object.__setattr__(self, "lstm_kernels", tuple(int(k) for k in self.lstm_kernels))
        if self.decoder is None:
            object.__setattr__(self, "decoder", self.mirror_decoder())
        else:
            object.__setattr__(self, "decoder", _layers(self.decoder))

    def mirror_decoder(self):
        outs = [s.filters for s in self.encoder[:-1]][::-1] + [1]
        return tuple(
            LayerSpec(c, s.kernel, s.stride, s.padding) for c, s in zip(outs, reversed(self.encoder))
        )

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = [asdict(s) for s in self.encoder]
        d["decoder"] = [asdict(s) for s in self.decoder]
        d["lstm_filters"] = list(self.lstm_filters)
        d["lstm_kernels"] = list(self.lstm_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VideoVolume:
    """``T`` stacked preprocessed frames ``[T, 1, H, W]`` plus their 1-based source frame numbers."""

    frames: np.ndarray
    source_indices: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1] != 1:
            raise ShapeError(f"a video volume is [T, 1, H, W], got {self.frames.shape}")
        if self.source_indices and len(self.source_indices) != self.frames.shape[0]:
            raise ShapeError("source_indices length must equal T")


def size_trace(config):
    """Walk the spatial size through every layer.

    Returns a list of ``(layer_name, in_size, out_size)`` rows; raises
    :class:`ConfigError` carrying the whole trace when the chain breaks.
    """
    if config.activation not in ("tanh", "sigmoid", "linear") or config.output_activation not in (
        "tanh", "sigmoid", "linear"
    ):
        raise ConfigError(f"unsupported activation {config.activation!r}/{config.output_activation!r}")
    if config.peephole not in PEEPHOLE_MODES:
        raise ConfigError(f"peephole must be one of {PEEPHOLE_MODES}")
    if len(config.lstm_filters) != len(config.lstm_kernels) or not config.lstm_filters:
        raise ConfigError("lstm_filters and lstm_kernels must be non-empty and equally long")
    if config.time_steps < 1:
        raise ConfigError("time_steps must be >= 1")

    trace = []

    def fail(msg):
        lines = "\n".join(f"  {name}: {a} -> {b}" for name, a, b in trace)
        raise ConfigError(f"{msg}\nsize trace so far:\n{lines}")

    n = config.frame_size
    enc_in = []
    for k, s in enumerate(config.encoder, 1):
        enc_in.append(n)
        try:
            out = tc.conv_output_size(n, s.kernel, s.stride, s.padding)
        except ShapeError as e:
            fail(f"enc{k}: {e}")
        trace.append((f"enc{k}", n, out))
        n = out
    for k, kernel in enumerate(config.lstm_kernels, 1):
        if kernel % 2 != 1:
            fail(f"lstm{k}: kernel {kernel} must be odd to preserve the state size")
        trace.append((f"lstm{k}", n, n))
    if len(config.decoder) != len(config.encoder):
        fail(f"decoder has {len(config.decoder)} layers but encoder has {len(config.encoder)}")
    for k, (d, e, target) in enumerate(zip(config.decoder, reversed(config.encoder), reversed(enc_in)), 1):
        out = (n - 1) * d.stride + d.kernel - 2 * d.padding
        trace.append((f"dec{k}", n, out))
        if (d.kernel, d.stride, d.padding) != (e.kernel, e.stride, e.padding):
            fail(f"dec{k} does not mirror the encoder: {d} vs {e}")
        if out != target:
            fail(f"dec{k} produces size {out}, mirror requires {target}")
        n = out
    if config.decoder[-1].filters != 1:
        fail(f"dec{len(config.decoder)} must output 1 channel, has {config.decoder[-1].filters}")
    return trace


class SpatioTemporalAE:
    """Parameters plus the config that shaped them.

    ``params`` is an insertion-ordered ``{name: array}`` dict; optimizers
    update the arrays in place.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self._check_shapes()

    def _expected_shapes(self):
        cfg = self.config
        shapes = {}
        cin = 1
        for k, s in enumerate(cfg.encoder, 1):
            shapes[f"enc{k}.W"] = (s.filters, cin, s.kernel, s.kernel)
            shapes[f"enc{k}.b"] = (s.filters,)
            cin = s.filters
        latent = cfg.frame_size
        for s in cfg.encoder:
            latent = tc.conv_output_size(latent, s.kernel, s.stride, s.padding)
        for k, (F, ks) in enumerate(zip(cfg.lstm_filters, cfg.lstm_kernels), 1):
            base = F + cin
            gate_in = base + F if cfg.peephole == "concat" else base
            for g in "fiCo":
                shapes[f"lstm{k}.W_{g}"] = (F, base if g == "C" else gate_in, ks, ks)
            for g in "fiCo":
                shapes[f"lstm{k}.b_{g}"] = (F,)
            if cfg.peephole == "hadamard":
                for g in "fio":
                    shapes[f"lstm{k}.w_c{g}"] = (F, latent, latent)
            cin = F
        for k, s in enumerate(cfg.decoder, 1):
            shapes[f"dec{k}.W"] = (cin, s.filters, s.kernel, s.kernel)
            shapes[f"dec{k}.b"] = (s.filters,)
            cin = s.filters
        return shapes

    def _check_shapes(self):
        expected = self._expected_shapes()
        if list(expected) != list(self.params):
            raise ConfigError(f"parameter names {list(self.params)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.params[name].shape}, config requires {shape}")

    def lstm_layers(self):
        layers = []
        for k in range(1, len(self.config.lstm_filters) + 1):
            kw = {n.split(".", 1)[1]: v for n, v in self.params.items() if n.startswith(f"lstm{k}.")}
            layers.append((LSTMParams(**kw), self.config.peephole))
        return layers

    def copy(self):
        return SpatioTemporalAE(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def input_shape(self):
        n = self.config.frame_size
        return (self.config.time_steps, 1, n, n)

    # -- forward / backward --------------------------------------------------

    def forward(self, x, return_cache=False):
        """Reconstruct ``[T,1,H,W]`` or a batch ``[B,T,1,H,W]``."""
        x = np.asarray(x.frames if isinstance(x, VideoVolume) else x, dtype=np.float64)
        single = x.ndim == 4
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects volumes of shape {self.input_shape}, got {x.shape[1:]}")
        cfg, P = self.config, self.params
        B, T = x.shape[:2]
        act = cfg.activation
        cache = {"x": x}

        h = x.reshape((B * T,) + x.shape[2:])
        enc = []
        for k, s in enumerate(cfg.encoder, 1):
            y = tc.activation(tc.conv2d(h, P[f"enc{k}.W"], P[f"enc{k}.b"], s.stride, s.padding), act)
            enc.append((h, y))
            h = y
        cache["enc"] = enc

        seq = h.reshape((B, T) + h.shape[1:]).swapaxes(0, 1)
        hs, lstm_cache = conv_lstm_sequence(seq, self.lstm_layers(), return_cache=True)
        cache["lstm"] = lstm_cache
        h = np.ascontiguousarray(hs.swapaxes(0, 1)).reshape((B * T,) + hs.shape[2:])

        dec = []
        last = len(cfg.decoder)
        for k, s in enumerate(cfg.decoder, 1):
            kind = cfg.output_activation if k == last else act
            y = tc.activation(tc.deconv2d(h, P[f"dec{k}.W"], P[f"dec{k}.b"], s.stride, s.padding), kind)
            dec.append((h, y, kind))
            h = y
        cache["dec"] = dec

        out = h.reshape(x.shape)
        out = out[0] if single else out
        if return_cache:
            cache["single"] = single
            return out, cache
        return out

    def backward(self, cache, grad_out):
        """Parameter gradients of ``sum(grad_out * forward(x))`` given the forward cache."""
        if cache is None or "dec" not in cache:
            raise ValueError("backward needs the intermediates saved by forward(..., return_cache=True)")
        cfg, P = self.config, self.params
        x = cache["x"]
        B, T = x.shape[:2]
        g = np.asarray(grad_out, dtype=np.float64)
        if cache["single"]:
            g = g[None]
        if g.shape != x.shape:
            raise ShapeError(f"grad_out shape {g.shape} != output shape {x.shape}")
        grads = {}
        g = g.reshape((B * T,) + x.shape[2:])

        for k in range(len(cfg.decoder), 0, -1):
            s = cfg.decoder[k - 1]
            h_in, y, kind = cache["dec"][k - 1]
            g = tc.activation_backward(g, y, kind)
            g, grads[f"dec{k}.W"], grads[f"dec{k}.b"] = tc.deconv2d_backward(
                g, h_in, P[f"dec{k}.W"], s.stride, s.padding
            )

        g = g.reshape((B, T) + g.shape[1:]).swapaxes(0, 1)
        g, lstm_grads = conv_lstm_sequence_backward(g, cache["lstm"])
        for k, lg in enumerate(lstm_grads, 1):
            for name, v in lg.items():
                grads[f"lstm{k}.{name}"] = v
        g = np.ascontiguousarray(g.swapaxes(0, 1))
        g = g.reshape((B * T,) + g.shape[2:])

        for k in range(len(cfg.encoder), 0, -1):
            s = cfg.encoder[k - 1]
            h_in, y = cache["enc"][k - 1]
            g = tc.activation_backward(g, y, cfg.activation)
            g, grads[f"enc{k}.W"], grads[f"enc{k}.b"] = tc.conv2d_backward(
                g, h_in, P[f"enc{k}.W"], s.stride, s.padding
            )
        return {name: grads[name] for name in P}


def build(config=None):
    """Build and deterministically initialise a model; rejects configs whose sizes do not round-trip."""
    config = config or ModelConfig()
    size_trace(config)
    rng = np.random.default_rng(config.seed)
    params = {}
    cin = 1
    for k, s in enumerate(config.encoder, 1):
        m2 = s.kernel * s.kernel
        params[f"enc{k}.W"] = tc.glorot_uniform(rng, (s.filters, cin, s.kernel, s.kernel), cin * m2, s.filters * m2)
        params[f"enc{k}.b"] = np.zeros(s.filters)
        cin = s.filters
    latent = config.frame_size
    for s in config.encoder:
        latent = tc.conv_output_size(latent, s.kernel, s.stride, s.padding)
    for k, (F, ks) in enumerate(zip(config.lstm_filters, config.lstm_kernels), 1):
        p = init_conv_lstm(rng, cin, F, ks, config.peephole, (latent, latent))
        for name, v in p.items():
            params[f"lstm{k}.{name}"] = v
        cin = F
    for k, s in enumerate(config.decoder, 1):
        m2 = s.kernel * s.kernel
        params[f"dec{k}.W"] = tc.glorot_uniform(rng, (cin, s.filters, s.kernel, s.kernel), cin * m2, s.filters * m2)
        params[f"dec{k}.b"] = np.zeros(s.filters)
        cin = s.filters
    return SpatioTemporalAE(config, params)


def forward(model, volume):
    out = model.forward(volume)
    if isinstance(volume, VideoVolume):
        return VideoVolume(out, volume.source_indices)
    return out


def reconstruction_loss(recon, target):
    """Mean squared error over all elements."""
    recon = np.asarray(recon.frames if isinstance(recon, VideoVolume) else recon, dtype=np.float64)
    target = np.asarray(target.frames if isinstance(target, VideoVolume) else target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} and input {target.shape} differ in shape")
    return float(np.mean((recon - target) ** 2))


def loss_and_grads(model, volumes):
    """MSE reconstruction loss of a batch and its gradient for every parameter."""
    x = np.asarray(volumes.frames if isinstance(volumes, VideoVolume) else volumes, dtype=np.float64)
    recon, cache = model.forward(x, return_cache=True)
    diff = recon - x
    loss = float(np.mean(diff * diff))
    grads = model.backward(cache, 2.0 * diff / diff.size)
    return loss, grads


def backward(model, volume):
    """Gradients of :func:`reconstruction_loss` for one volume (or batch)."""
    return loss_and_grads(model, volume)[1]


# ---------------------------------------------------------------------------
# checkpoint container: an uncompressed zip of .npy members plus meta.json,
# written with fixed timestamps so identical content gives identical bytes

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model, arrays=None, meta=None):
    """Write model config, parameters and optional extra arrays/metadata.

    ``arrays`` entries are stored under ``extra/<name>.npy``; ``meta`` must be
    JSON-serialisable.
    """
    header = {
        "format": "stae-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        # lists, not dicts: sort_keys must not reorder parameters
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "extra": [[k, list(np.shape(v))] for k, v in (arrays or {}).items()],
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(header, indent=2, sort_keys=True).encode())
        for name, v in model.params.items():
            _write_member(zf, f"params/{name}.npy", _npy_bytes(v))
        for name, v in (arrays or {}).items():
            _write_member(zf, f"extra/{name}.npy", _npy_bytes(np.asarray(v)))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: returns ``(model, arrays, meta)``."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("meta.json"))
        if header.get("format") != "stae-checkpoint":
            raise ValueError(f"{path} is not a stae checkpoint")
        config = ModelConfig.from_dict(header["config"])

        def read(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        params = {k: read(f"params/{k}.npy") for k, _ in header["params"]}
        arrays = {k: read(f"extra/{k}.npy") for k, _ in header["extra"]}
    return SpatioTemporalAE(config, params), arrays, header["meta"]
