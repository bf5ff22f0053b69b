#!/usr/bin/env python3
"""The differentiation engine and the layer vocabulary.

Everything the estimators need runs on a small reverse-mode tape over
float64 numpy arrays: matrix products, the usual pointwise nonlinearities,
stable softmax, and slicing/stacking for sequences. Gradients check out
against central differences.
"""

import numpy as np

from cropstage import autodiff as ad
from cropstage.layers import DenseLayer, LstmLayer, SelfAttention

rng = np.random.default_rng(0)

# --- a scalar chain ----------------------------------------------------------
x = ad.parameter([1.5])
y = ad.sum_all(ad.mul(ad.tanh(x), x))          # y = x * tanh(x)
ad.backward(y)
analytic = x.grad[0]
h = 1e-5
fd = ((1.5 + h) * np.tanh(1.5 + h) - (1.5 - h) * np.tanh(1.5 - h)) / (2 * h)
print(f"d/dx x*tanh(x) at 1.5: analytic {analytic:.10f}, central diff {fd:.10f}")

# --- gradients accumulate until zeroed ---------------------------------------
p = ad.parameter([2.0])
loss = ad.sum_all(ad.mul(p, p))
ad.backward(loss)
ad.backward(loss)
print(f"two backward passes on x^2 at x=2: grad {p.grad[0]} (2 * 2x)")

# --- an LSTM step by hand ----------------------------------------------------
# With zero weights the recurrence reduces to its biases:
# h1 = sig(b_o) * tanh(sig(b_i) * tanh(b_c))
lstm = LstmLayer.create(3, hidden=4, rng=rng)
for gate in lstm.GATES:
    lstm.w[gate].value[...] = 0.0
    lstm.u[gate].value[...] = 0.0
    lstm.b[gate].value[...] = 0.0
lstm.b["i"].value[...] = 0.4
lstm.b["c"].value[...] = 0.9
lstm.b["o"].value[...] = -0.6


def sig(v):
    return 1 / (1 + np.exp(-v))


out = lstm.forward(ad.constant(rng.uniform(-1, 1, (1, 1, 3))))
expected = sig(-0.6) * np.tanh(sig(0.4) * np.tanh(0.9))
print(f"bias-only LSTM step: {out.value[0, 0]:.12f} vs hand {expected:.12f}")

# --- attention weights are a distribution over the sequence -------------------
attn = SelfAttention(d_model=2, n_heads=2, key_dim=5, rng=rng)
seq = ad.constant(rng.uniform(-1, 1, (1, 6, 2)))
weights = []
attn.forward(seq, weights_out=weights)
print(f"attention row sums (head 0): {weights[0].sum(axis=-1).round(12)[0]}")

# --- a dense layer's parameter gradient vs finite differences -----------------
layer = DenseLayer.create(4, 3, "tanh", rng)
x0 = rng.uniform(-1, 1, (2, 4))
ad.backward(ad.sum_all(layer.forward(ad.constant(x0))))
idx = (1, 2)
orig = layer.w.value[idx]
layer.w.value[idx] = orig + h
up = np.tanh(x0 @ layer.w.value + layer.b.value).sum()
layer.w.value[idx] = orig - h
down = np.tanh(x0 @ layer.w.value + layer.b.value).sum()
layer.w.value[idx] = orig
print(f"dense dL/dw[1,2]: analytic {layer.w.grad[idx]:.10f}, "
      f"central diff {(up - down) / (2 * h):.10f}")
