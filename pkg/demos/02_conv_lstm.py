"""
A ConvLSTM remembers where things were
======================================

A ConvLSTM cell is an LSTM whose weight products are convolutions, so its
hidden state is a stack of feature maps.  Here a single-layer cell reads a
short sequence and we look at how its state evolves, then confirm that a
1x1 kernel on a 1x1 grid is nothing more than a fully connected LSTM.
"""

import numpy as np

from stae.recurrent import (
    LSTMState,
    conv_lstm_sequence,
    conv_lstm_step,
    fc_lstm_step,
    init_conv_lstm,
    init_fc_lstm,
)

rng = np.random.default_rng(1)

# one layer, 1 input channel, 4 filters, 3x3 kernels, peephole on the gates
layer = init_conv_lstm(rng, in_channels=1, filters=4, kernel_size=3)

# a bright dot walking across an 8x8 grid for 6 steps, batch of one
xs = np.zeros((6, 1, 1, 8, 8))
for t in range(6):
    xs[t, 0, 0, 4, t + 1] = 1.0

hs = conv_lstm_sequence(xs, [(layer, "concat")])
print("hidden states", hs.shape)
for t in range(6):
    print(f"step {t}: |h| = {np.linalg.norm(hs[t]):.4f}")

# without peepholes the cell is the plain ConvLSTM; shapes stay the same
plain = init_conv_lstm(np.random.default_rng(1), 1, 4, 3, peephole="none")
print("no peephole", conv_lstm_sequence(xs, [(plain, "none")]).shape)

# on a 1x1 grid with 1x1 kernels the convolution is a matrix product
fc = init_fc_lstm(rng, input_size=3, hidden_size=2)
conv = init_conv_lstm(rng, in_channels=3, filters=2, kernel_size=1, peephole="none")
for name in ("W_f", "W_i", "W_C", "W_o"):
    setattr(conv, name, getattr(fc, name)[:, :, None, None])
x = rng.normal(size=(1, 3))
prev = LSTMState(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)))
a = fc_lstm_step(x, prev, fc)
b = conv_lstm_step(x[:, :, None, None], LSTMState(prev.h[:, :, None, None], prev.C[:, :, None, None]), conv, "none")
print("FC vs 1x1 ConvLSTM, max gap in h:", np.abs(a.h - b.h[:, :, 0, 0]).max())
