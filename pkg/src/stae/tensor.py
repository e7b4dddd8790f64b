"""Dense convolution primitives with hand-written reverse-mode gradients.

Tensors are plain ``float64`` numpy arrays laid out ``[N, C, H, W]``.  Every
public function also accepts an unbatched ``[C, H, W]`` array and returns an
unbatched result in that case.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvSpec",
    "conv_output_size",
    "deconv_output_size",
    "conv2d",
    "conv2d_backward",
    "deconv2d",
    "deconv2d_backward",
    "activation",
    "activation_backward",
    "glorot_uniform",
]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a square 2D convolution layer."""

    filter_size: int
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("filter_size", "stride", "in_channels", "out_channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def filter_shape(self):
        return (self.out_channels, self.in_channels, self.filter_size, self.filter_size)

    def output_size(self, n):
        return conv_output_size(n, self.filter_size, self.stride, self.padding)

    def transposed_output_size(self, n):
        return deconv_output_size(n, self.filter_size, self.stride, self.padding)


def conv_output_size(n, m, stride=1, padding=0):
    """Spatial output size ``floor((n + 2p - m) / s) + 1`` of a convolution."""
    if n + 2 * padding < m:
        raise ShapeError(
            f"filter size {m} exceeds padded input size {n} + 2*{padding} = {n + 2 * padding}"
        )
    return (n + 2 * padding - m) // stride + 1


def deconv_output_size(n, m, stride=1, padding=0):
    """Spatial output size ``(n - 1) s + m - 2p`` of a transposed convolution."""
    out = (n - 1) * stride + m - 2 * padding
    if out < 1:
        raise ShapeError(f"transposed convolution of size {n} with m={m}, s={stride}, p={padding} is empty")
    return out


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
    return x, False


def _check_filters(filters, in_channels, what):
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
        raise ShapeError(f"{what} filters must be [C_out,C_in,m,m], got shape {filters.shape}")
    if filters.shape[1 if what == "conv2d" else 0] != in_channels:
        axis = 1 if what == "conv2d" else 0
        raise ShapeError(
            f"{what}: input has {in_channels} channels but filters dim {axis} is {filters.shape[axis]}"
        )


def _im2col(x, m, stride, padding, out_hw=None):
    """Gather patches of ``[N, C, H, W]`` into a ``[C, m, m, N, Ho, Wo]`` column tensor.

    ``out_hw`` may crop the window grid below what the padded input allows.
    """
    n, c, h, w = x.shape
    ho = (h + 2 * padding - m) // stride + 1
    wo = (w + 2 * padding - m) // stride + 1
    if out_hw is not None:
        ho, wo = out_hw
    xc = x.transpose(1, 0, 2, 3)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, m, m, n, ho, wo))
    for i in range(m):
        for j in range(m):
            cols[:, i, j] = xc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols, out_hw, stride, padding):
    """Adjoint of :func:`_im2col`: accumulate ``[C, m, m, N, Ho, Wo]`` columns into ``[N, C, H, W]``."""
    c, m, _, n, ho, wo = cols.shape
    full_h = max(out_hw[0] + 2 * padding, (ho - 1) * stride + m)
    full_w = max(out_hw[1] + 2 * padding, (wo - 1) * stride + m)
    img = np.zeros((c, n, full_h, full_w))
    for i in range(m):
        for j in range(m):
            img[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    img = img[:, :, padding : padding + out_hw[0], padding : padding + out_hw[1]]
    return np.ascontiguousarray(img.transpose(1, 0, 2, 3))


def _channels_first(a):
    # [N, C, H, W] -> [C, N*H*W]
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_channels_first(a, n, hw):
    return np.ascontiguousarray(a.reshape((a.shape[0], n) + tuple(hw)).transpose(1, 0, 2, 3))


def conv2d(x, filters, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` with a bank of square filters.

    Each output value is the dot product of one filter with the matching
    input patch, plus that filter's bias.
    """
    x, single = _batched(x)
    filters = np.asarray(filters, dtype=np.float64)
    _check_filters(filters, x.shape[1], "conv2d")
    m = filters.shape[2]
    out_hw = tuple(conv_output_size(n, m, stride, padding) for n in x.shape[2:])
    cols = _im2col(x, m, stride, padding)
    out = filters.reshape(filters.shape[0], -1) @ cols.reshape(-1, x.shape[0] * out_hw[0] * out_hw[1])
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None]
    out = _from_channels_first(out, x.shape[0], out_hw)
    return out[0] if single else out


def conv2d_backward(grad_out, x, filters, stride=1, padding=0):
    """Gradients of ``sum(grad_out * conv2d(x, filters, b))``.

    Returns ``(grad_input, grad_filters, grad_bias)``.
    """
    x, single = _batched(x)
    g, _ = _batched(grad_out)
    filters = np.asarray(filters, dtype=np.float64)
    O, C, m, _ = filters.shape
    expected = (x.shape[0], O) + tuple(conv_output_size(n, m, stride, padding) for n in x.shape[2:])
    if g.shape != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {g.shape} != forward output shape {expected}")
    gc = _channels_first(g)
    cols = _im2col(x, m, stride, padding)
    grad_filters = (gc @ cols.reshape(C * m * m, -1).T).reshape(filters.shape)
    grad_bias = gc.sum(axis=1)
    gcols = (filters.reshape(O, -1).T @ gc).reshape((C, m, m) + (x.shape[0],) + g.shape[2:])
    grad_input = _col2im(gcols, x.shape[2:], stride, padding)
    return (grad_input[0] if single else grad_input), grad_filters, grad_bias


def deconv2d(x, filters, bias=None, stride=1, padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d` for shared filters.

    ``filters`` has the layout of the forward convolution it mirrors, i.e.
    ``[C_in, C_out, m, m]`` from this layer's point of view.
    """
    x, single = _batched(x)
    filters = np.asarray(filters, dtype=np.float64)
    _check_filters(filters, x.shape[1], "deconv2d")
    Ci, Co, m, _ = filters.shape
    out_hw = tuple(deconv_output_size(n, m, stride, padding) for n in x.shape[2:])
    cols = (filters.reshape(Ci, -1).T @ _channels_first(x)).reshape((Co, m, m) + (x.shape[0],) + x.shape[2:])
    out = _col2im(cols, out_hw, stride, padding)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out[0] if single else out


def deconv2d_backward(grad_out, x, filters, stride=1, padding=0):
    """Gradients of ``sum(grad_out * deconv2d(x, filters, b))``."""
    x, single = _batched(x)
    g, _ = _batched(grad_out)
    filters = np.asarray(filters, dtype=np.float64)
    Ci, Co, m, _ = filters.shape
    expected = (x.shape[0], Co) + tuple(deconv_output_size(n, m, stride, padding) for n in x.shape[2:])
    if g.shape != expected:
        raise ShapeError(f"deconv2d_backward: grad_out shape {g.shape} != forward output shape {expected}")
    cols = _im2col(g, m, stride, padding, out_hw=x.shape[2:]).reshape(Co * m * m, -1)
    xc = _channels_first(x)
    grad_input = _from_channels_first(filters.reshape(Ci, -1) @ cols, x.shape[0], x.shape[2:])
    grad_filters = (xc @ cols.T).reshape(filters.shape)
    grad_bias = g.sum(axis=(0, 2, 3))
    return (grad_input[0] if single else grad_input), grad_filters, grad_bias


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


_ACTIVATIONS = {
    "tanh": np.tanh,
    "sigmoid": sigmoid,
    "linear": lambda x: np.asarray(x, dtype=np.float64),
}


def activation(x, kind="tanh"):
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None


def activation_backward(grad_out, y, kind="tanh"):
    """Backpropagate through an activation given its *output* ``y``."""
    if kind == "tanh":
        return grad_out * (1.0 - y * y)
    if kind == "sigmoid":
        return grad_out * y * (1.0 - y)
    if kind == "linear":
        return grad_out
    raise ValueError(f"unknown activation {kind!r}")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
