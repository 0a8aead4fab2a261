"""Tour of the tensor kernel: tape-recorded ops and reverse-mode gradients.

Builds a tiny convolution graph, runs the reverse sweep, and cross-checks
one weight's gradient against a central finite difference.
"""

import numpy as np

from duflow import Bias, ConvSpec, FilterBank, Graph, Tensor4

rng = np.random.default_rng(0)

# a 1x2x8x8 input, a 3x3 filter bank with dilation 2, and a scalar loss
x = Tensor4(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
w = FilterBank(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
b = Bias(np.zeros(4), requires_grad=True)

g = Graph()
feat = g.leaky_relu(g.conv2d(x, w, b, ConvSpec(stride=1, dilation=2, padding=2)), 0.1)
loss = g.reduce_mean(g.mul(feat, feat))
print(f"forward: feature map {feat.shape}, loss {loss.data.item():.6f}")
print(f"tape recorded {len(g)} ops")

g.backward(loss)
print(f"gradients: |dL/dx| mean {np.abs(x.grad).mean():.6f}, "
      f"|dL/dW| mean {np.abs(w.grad).mean():.6f}")

# cross-check one filter weight against (f(w+h) - f(w-h)) / 2h
h = 1e-5
flat = w.data.reshape(-1)


def loss_value():
    gg = Graph()
    f = gg.leaky_relu(gg.conv2d(Tensor4(x.data), FilterBank(w.data), Bias(b.data),
                                ConvSpec(stride=1, dilation=2, padding=2)), 0.1)
    return gg.reduce_mean(gg.mul(f, f)).data.item()


orig = flat[7]
flat[7] = orig + h
fp = loss_value()
flat[7] = orig - h
fm = loss_value()
flat[7] = orig
numeric = (fp - fm) / (2 * h)
analytic = w.grad.reshape(-1)[7]
print(f"weight[7]: analytic {analytic:.8f} vs finite difference {numeric:.8f}")
assert abs(analytic - numeric) / max(abs(analytic), 1e-8) < 1e-6
print("gradient check passed")
