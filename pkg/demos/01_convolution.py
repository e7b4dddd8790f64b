"""
Strided convolution and its transpose
=====================================

The encoder shrinks frames with strided convolutions and the decoder grows
them back with transposed ones.  This walk-through checks the output sizes,
shows that the two operations are adjoint and compares an analytic gradient
with central differences.
"""

import numpy as np

from stae.tensor import conv2d, conv2d_backward, conv_output_size, deconv2d, deconv_output_size

rng = np.random.default_rng(0)

# the default encoder takes 227 -> 55 -> 26 and the decoder undoes it
print("227 -> 11x11/4 ->", conv_output_size(227, 11, stride=4))
print(" 55 ->  5x5/2  ->", conv_output_size(55, 5, stride=2))
print(" 26 ->  5x5/2  ->", deconv_output_size(26, 5, stride=2))
print(" 55 -> 11x11/4 ->", deconv_output_size(55, 11, stride=4))

# a small batch, two input channels, three 3x3 filters with stride 2
x = rng.normal(size=(2, 2, 9, 9))
w = rng.normal(size=(3, 2, 3, 3))
y = conv2d(x, w, stride=2, padding=1)
print("conv2d", x.shape, "->", y.shape)

# adjointness: <conv(x), g> == <x, deconv(g)> with the same filters
g = rng.normal(size=y.shape)
lhs = np.sum(y * g)
rhs = np.sum(x * deconv2d(g, w, stride=2, padding=1)[:, :, :9, :9])
print("adjoint gap", abs(lhs - rhs))

# gradient of sum(g * conv2d(x, w)) with respect to one filter weight
_, dw, _ = conv2d_backward(g, x, w, stride=2, padding=1)
eps = 1e-5
wp, wm = w.copy(), w.copy()
wp[1, 0, 2, 1] += eps
wm[1, 0, 2, 1] -= eps
fd = (np.sum(g * conv2d(x, wp, stride=2, padding=1)) - np.sum(g * conv2d(x, wm, stride=2, padding=1))) / (2 * eps)
print("analytic", dw[1, 0, 2, 1], "numeric", fd)
