# coding: utf-8

# # Gradients by hand and by tape
#
# Every op in amil.tensor records a backward closure. Calling backward() on a
# scalar walks those closures in reverse and fills .grad on the leaves.

import numpy as np

from amil import tensor as T
from amil.tensor import Tensor

# A tiny logistic unit: sigmoid(w . x)

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 1)))
w = Tensor(rng.normal(size=(1, 4)), requires_grad=True)

p = T.sigmoid(T.reshape(T.matmul(w, x), ()))
loss = T.bce_loss(p, 1)
T.backward(loss)
print("loss", loss.item())
print("tape grad", w.grad.ravel())

# The closed form is (p - 1) * x for a positive label.

print("by hand  ", ((p.item() - 1) * x.data).ravel())

# finite_diff_check does the comparison against central differences for us.
# The number it returns is max |analytic - numeric| / max(1, |analytic|).

err = T.finite_diff_check(lambda v: T.bce_loss(T.sigmoid(T.reshape(T.matmul(v, x), ())), 1), w)
print("relative error", err)

# The same works through a convolution and a max-pool, as long as no pooling
# window holds two equal maxima.

img = Tensor(rng.random((1, 8, 8)))
kernel = rng.normal(size=(2, 1, 3, 3))
bias = np.zeros(2)

def conv_pool(k):
    return T.sum_all(T.maxpool2d(T.relu(T.conv2d(img, k, Tensor(bias))), 2))

print("conv/pool relative error", T.finite_diff_check(conv_pool, Tensor(kernel)))

# Without a tape, nothing is recorded and nothing can be differentiated.

with T.no_grad():
    q = T.sigmoid(T.reshape(T.matmul(w, x), ()))
print("recorded parents under no_grad:", len(q._parents))
