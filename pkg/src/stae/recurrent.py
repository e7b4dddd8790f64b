"""FC-LSTM and ConvLSTM cells with backpropagation through time.

Gate pre-activations take the concatenation ``[h_{t-1}, x_t]``; ConvLSTM
gates f, i, o may additionally see the previous cell state ``C_{t-1}``
through one of three peephole modes:

``"concat"``
    ``C_{t-1}`` is appended as extra input channels to the gate convolution,
    i.e. ``W_f * [h_{t-1}, x_t, C_{t-1}]``.  This is the default.
``"hadamard"``
    elementwise peephole weights ``w_c* ⊙ C_{t-1}`` added to the gate
    pre-activation (the usual ConvLSTM formulation).
``"none"``
    gates ignore ``C_{t-1}``.

The candidate ``Ĉ_t`` never sees ``C_{t-1}``.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from .tensor import ShapeError, conv2d, conv2d_backward, glorot_uniform, sigmoid

PEEPHOLE_MODES = ("concat", "hadamard", "none")


@dataclass
class LSTMParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_C: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_C: np.ndarray
    b_o: np.ndarray
    # elementwise peephole weights, only for the "hadamard" mode
    w_cf: np.ndarray = None
    w_ci: np.ndarray = None
    w_co: np.ndarray = None

    def items(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                yield f.name, v

    def zeros_like(self):
        return replace(self, **{k: np.zeros_like(v) for k, v in self.items()})


@dataclass
class LSTMState:
    h: np.ndarray
    C: np.ndarray


def _peephole_mode(peephole):
    if peephole is True:
        return "concat"
    if peephole is False or peephole is None:
        return "none"
    if peephole not in PEEPHOLE_MODES:
        raise ValueError(f"peephole must be one of {PEEPHOLE_MODES}, got {peephole!r}")
    return peephole


# ---------------------------------------------------------------------------
# FC-LSTM


def init_fc_lstm(rng, input_size, hidden_size):
    fan_in = input_size + hidden_size
    W = {k: glorot_uniform(rng, (hidden_size, fan_in), fan_in, hidden_size) for k in "fiCo"}
    return LSTMParams(
        W_f=W["f"], W_i=W["i"], W_C=W["C"], W_o=W["o"],
        b_f=np.zeros(hidden_size), b_i=np.zeros(hidden_size),
        b_C=np.zeros(hidden_size), b_o=np.zeros(hidden_size),
    )


def _fc_forward(x, prev, p):
    if x.shape[:-1] != prev.h.shape[:-1] or prev.h.shape != prev.C.shape:
        raise ShapeError(f"fc_lstm_step: x {x.shape}, h {prev.h.shape}, C {prev.C.shape} are incompatible")
    z = np.concatenate([prev.h, x], axis=-1)
    if p.W_f.shape[1] != z.shape[-1] or p.W_f.shape[0] != prev.h.shape[-1]:
        raise ShapeError(f"fc_lstm_step: weights {p.W_f.shape} do not match [h, x] of size {z.shape[-1]}")
    f = sigmoid(z @ p.W_f.T + p.b_f)
    i = sigmoid(z @ p.W_i.T + p.b_i)
    c_hat = np.tanh(z @ p.W_C.T + p.b_C)
    o = sigmoid(z @ p.W_o.T + p.b_o)
    C = f * prev.C + i * c_hat
    tc = np.tanh(C)
    h = o * tc
    return LSTMState(h, C), (z, prev.C, f, i, c_hat, o, tc)


def fc_lstm_step(x_t, prev, p):
    """One step of the fully connected LSTM.  Leading batch dims are allowed."""
    state, _ = _fc_forward(np.asarray(x_t, dtype=np.float64), prev, p)
    return state


def _fc_backward(dh, dC_next, cache, p, grads):
    z, C_prev, f, i, c_hat, o, tc = cache
    do = dh * tc
    dC = dC_next + dh * o * (1.0 - tc * tc)
    da_f = dC * C_prev * f * (1.0 - f)
    da_i = dC * c_hat * i * (1.0 - i)
    da_C = dC * i * (1.0 - c_hat * c_hat)
    da_o = do * o * (1.0 - o)
    dz = 0.0
    for gate, da in (("f", da_f), ("i", da_i), ("C", da_C), ("o", da_o)):
        W = getattr(p, "W_" + gate)
        da2 = da.reshape(-1, da.shape[-1])
        getattr(grads, "W_" + gate)[...] += da2.T @ z.reshape(-1, z.shape[-1])
        getattr(grads, "b_" + gate)[...] += da2.sum(axis=0)
        dz = dz + da @ W
    H = dh.shape[-1]
    return dz[..., :H], dz[..., H:], dC * f


def fc_lstm_sequence(xs, p, return_cache=False):
    """Unroll an FC-LSTM over ``xs[t]`` from zero state; returns all hidden states."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[0] == 0:
        raise ValueError("empty sequence")
    H = p.W_f.shape[0]
    state = LSTMState(np.zeros(xs.shape[1:-1] + (H,)), np.zeros(xs.shape[1:-1] + (H,)))
    hs, caches = [], []
    for x in xs:
        state, cache = _fc_forward(x, state, p)
        hs.append(state.h)
        caches.append(cache)
    hs = np.stack(hs)
    return (hs, caches) if return_cache else hs


def fc_lstm_sequence_backward(grad_hs, caches, p):
    """BPTT for :func:`fc_lstm_sequence`.  Returns ``(grad_xs, grad_params)``."""
    grads = p.zeros_like()
    dh_next = np.zeros_like(grad_hs[0])
    dC_next = np.zeros_like(grad_hs[0])
    dxs = [None] * len(caches)
    for t in range(len(caches) - 1, -1, -1):
        dh_next, dxs[t], dC_next = _fc_backward(grad_hs[t] + dh_next, dC_next, caches[t], p, grads)
    return np.stack(dxs), grads


# ---------------------------------------------------------------------------
# ConvLSTM


def init_conv_lstm(rng, in_channels, filters, kernel_size, peephole="concat", spatial_shape=None):
    """Glorot-initialised ConvLSTM parameters.

    ``spatial_shape`` is required for the ``"hadamard"`` peephole, whose
    weights are full feature maps.
    """
    mode = _peephole_mode(peephole)
    if kernel_size % 2 != 1:
        raise ValueError(f"ConvLSTM kernels must be odd to keep the state size, got {kernel_size}")
    base = filters + in_channels
    gate_in = base + filters if mode == "concat" else base
    k2 = kernel_size * kernel_size

    def w(cin):
        return glorot_uniform(rng, (filters, cin, kernel_size, kernel_size), cin * k2, filters * k2)

    p = LSTMParams(
        W_f=w(gate_in), W_i=w(gate_in), W_C=w(base), W_o=w(gate_in),
        b_f=np.zeros(filters), b_i=np.zeros(filters), b_C=np.zeros(filters), b_o=np.zeros(filters),
    )
    if mode == "hadamard":
        if spatial_shape is None:
            raise ValueError("hadamard peephole needs spatial_shape")
        shape = (filters,) + tuple(spatial_shape)
        p.w_cf, p.w_ci, p.w_co = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    return p


def _conv_forward(x, prev, p, mode):
    if x.ndim != 4 or prev.h.ndim != 4:
        raise ShapeError(f"conv_lstm_step expects [N,C,H,W] tensors, got x {x.shape}, h {prev.h.shape}")
    if x.shape[0] != prev.h.shape[0] or x.shape[2:] != prev.h.shape[2:] or prev.h.shape != prev.C.shape:
        raise ShapeError(f"conv_lstm_step: x {x.shape}, h {prev.h.shape}, C {prev.C.shape} disagree")
    F, Cx = prev.h.shape[1], x.shape[1]
    k = p.W_C.shape[-1]
    if k % 2 != 1:
        raise ShapeError(f"ConvLSTM kernel {k} is even; recurrent convolutions must preserve state size")
    if p.W_C.shape[:2] != (F, F + Cx):
        raise ShapeError(f"W_C has shape {p.W_C.shape}, expected ({F}, {F + Cx}, {k}, {k})")
    zc = np.concatenate([prev.h, x], axis=1)
    if mode == "concat":
        zg = np.concatenate([prev.h, x, prev.C], axis=1)
    else:
        zg = zc
    n_in = zg.shape[1]
    if p.W_f.shape[1] < n_in:
        raise ShapeError(f"gate weights have {p.W_f.shape[1]} input channels, need {n_in} for peephole={mode!r}")
    Wg = np.concatenate([p.W_f[:, :n_in], p.W_i[:, :n_in], p.W_o[:, :n_in]], axis=0)
    pad = k // 2
    a = conv2d(zg, Wg, np.concatenate([p.b_f, p.b_i, p.b_o]), padding=pad)
    a_f, a_i, a_o = a[:, :F], a[:, F : 2 * F], a[:, 2 * F :]
    if mode == "hadamard":
        a_f = a_f + p.w_cf * prev.C
        a_i = a_i + p.w_ci * prev.C
        a_o = a_o + p.w_co * prev.C
    f, i, o = sigmoid(a_f), sigmoid(a_i), sigmoid(a_o)
    c_hat = np.tanh(conv2d(zc, p.W_C, p.b_C, padding=pad))
    C = f * prev.C + i * c_hat
    tc = np.tanh(C)
    h = o * tc
    return LSTMState(h, C), (zc, zg, Wg, prev.C, f, i, c_hat, o, tc, mode)


def conv_lstm_step(x_t, prev, p, peephole="concat", stride=1):
    """One ConvLSTM step on ``[C,H,W]`` or ``[N,C,H,W]`` tensors.

    Convolutions are zero-padded to "same" size; ``stride`` exists only to be
    rejected, since a strided recurrence would shrink the state.
    """
    if stride != 1:
        raise ValueError(f"ConvLSTM convolutions must use stride 1 to preserve the state, got {stride}")
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 3
    if single:
        prev = LSTMState(prev.h[None], prev.C[None])
        x = x[None]
    state, _ = _conv_forward(x, prev, p, _peephole_mode(peephole))
    if single:
        state = LSTMState(state.h[0], state.C[0])
    return state


def _conv_backward(dh, dC_next, cache, p, grads):
    zc, zg, Wg, C_prev, f, i, c_hat, o, tc, mode = cache
    F = dh.shape[1]
    pad = p.W_C.shape[-1] // 2
    do = dh * tc
    dC = dC_next + dh * o * (1.0 - tc * tc)
    da_f = dC * C_prev * f * (1.0 - f)
    da_i = dC * c_hat * i * (1.0 - i)
    da_o = do * o * (1.0 - o)
    da_C = dC * i * (1.0 - c_hat * c_hat)
    dC_prev = dC * f

    if mode == "hadamard":
        grads.w_cf += (da_f * C_prev).sum(axis=0)
        grads.w_ci += (da_i * C_prev).sum(axis=0)
        grads.w_co += (da_o * C_prev).sum(axis=0)
        dC_prev = dC_prev + da_f * p.w_cf + da_i * p.w_ci + da_o * p.w_co

    dzg, dWg, dbg = conv2d_backward(np.concatenate([da_f, da_i, da_o], axis=1), zg, Wg, padding=pad)
    n_in = zg.shape[1]
    grads.W_f[:, :n_in] += dWg[:F]
    grads.W_i[:, :n_in] += dWg[F : 2 * F]
    grads.W_o[:, :n_in] += dWg[2 * F :]
    grads.b_f += dbg[:F]
    grads.b_i += dbg[F : 2 * F]
    grads.b_o += dbg[2 * F :]

    dzc, dW_C, db_C = conv2d_backward(da_C, zc, p.W_C, padding=pad)
    grads.W_C += dW_C
    grads.b_C += db_C

    dh_prev = dzg[:, :F] + dzc[:, :F]
    dx = dzg[:, F : zc.shape[1]] + dzc[:, F:]
    if mode == "concat":
        dC_prev = dC_prev + dzg[:, zc.shape[1] :]
    return dh_prev, dx, dC_prev


def _as_layers(layers):
    out = []
    for layer in layers:
        if isinstance(layer, LSTMParams):
            out.append((layer, "concat"))
        else:
            p, peep = layer
            out.append((p, _peephole_mode(peep)))
    return out


def conv_lstm_sequence(inputs, layers, return_cache=False):
    """Run a stack of ConvLSTM layers over a time-major sequence.

    ``inputs`` is ``[T, N, C, H, W]`` (or ``[T, C, H, W]``); ``layers`` is a
    list of ``(LSTMParams, peephole)`` pairs.  All states start at zero and
    the top layer's hidden states for every step are returned.
    """
    xs = np.asarray(inputs, dtype=np.float64)
    if xs.shape[0] == 0:
        raise ValueError("empty sequence")
    single = xs.ndim == 4
    if single:
        xs = xs[:, None]
    layers = _as_layers(layers)
    caches = []
    for p, mode in layers:
        F = p.W_C.shape[0]
        shape = (xs.shape[1], F) + xs.shape[3:]
        state = LSTMState(np.zeros(shape), np.zeros(shape))
        hs, layer_cache = [], []
        for x in xs:
            state, c = _conv_forward(x, state, p, mode)
            hs.append(state.h)
            layer_cache.append(c)
        caches.append(layer_cache)
        xs = np.stack(hs)
    out = xs[:, 0] if single else xs
    if return_cache:
        return out, (caches, layers, single)
    return out


def conv_lstm_sequence_backward(grad_out, cache):
    """BPTT through the stack.  Returns ``(grad_inputs, [grad LSTMParams per layer])``."""
    caches, layers, single = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[:, None]
    all_grads = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        p, _ = layers[li]
        grads = p.zeros_like()
        layer_cache = caches[li]
        dh_next = np.zeros_like(g[0])
        dC_next = np.zeros_like(g[0])
        dxs = [None] * len(layer_cache)
        for t in range(len(layer_cache) - 1, -1, -1):
            dh_next, dxs[t], dC_next = _conv_backward(g[t] + dh_next, dC_next, layer_cache[t], p, grads)
        all_grads[li] = grads
        g = np.stack(dxs)
    return (g[:, 0] if single else g), all_grads
