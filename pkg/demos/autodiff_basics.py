"""Tour of the numeric core: tensors, the tape, and gradient checking.

Everything downstream (attention, losses, the detector) is built from
these pieces, so this is the right place to start reading.
"""

import numpy as np

from rotdet import numcore as nc

rng = np.random.default_rng(0)

# Tensors wrap float64 numpy arrays. Nothing is recorded unless a Graph
# is open, so inference costs no memory for bookkeeping.
x = nc.tensor(rng.standard_normal((4, 3)), requires_grad=True)
w = nc.tensor(rng.standard_normal((3, 2)), requires_grad=True)

y = nc.linear(x, w)
print("no graph open -> no gradients:", x.grad is None)

# Open a tape, build a scalar, and run the backward sweep.
with nc.Graph() as g:
    loss = (nc.linear(x, w).sigmoid() ** 2).sum()
    nc.backward(g, loss)
print("loss:", float(loss.data))
print("dloss/dw:\n", w.grad)

# The same loss through central finite differences. gradcheck perturbs
# along random directions and reports the worst relative error.
err = nc.gradcheck(lambda x, w: (nc.linear(x, w).sigmoid() ** 2).sum(),
                   [x, w], rng)
print(f"gradcheck rel err: {err:.2e}")

# Bilinear sampling is the workhorse of deformable attention: sample a
# feature map at fractional, gradient-carrying locations.
feat = nc.tensor(rng.standard_normal((2, 8, 8)), requires_grad=True)
pts = nc.tensor(np.array([[0.25, 0.5], [0.9, 0.1]]), requires_grad=True)
with nc.Graph() as g:
    samp = nc.bilinear_sample(feat, pts)
    nc.backward(g, samp.sum())
print("sampled values:\n", samp.data)
print("gradient w.r.t. the sample locations:\n", pts.grad)
err = nc.gradcheck(lambda f, p: nc.bilinear_sample(f, p).sum(),
                   [feat, pts], rng)
print(f"bilinear gradcheck rel err: {err:.2e}")
