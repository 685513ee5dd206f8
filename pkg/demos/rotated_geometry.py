"""Rotated boxes: exact IoU by polygon clipping, and why the naive 5-D
regression target is ambiguous.

A rotated rectangle has two equivalent parameterizations: (w, h, theta)
and (h, w, theta - pi/2) describe the same set of points. An L1 loss on
the raw 5-vector punishes a prediction that lands on the "wrong" one;
the point set loss compares corner sets instead and is exactly zero.
"""

import math

import numpy as np

from rotdet import geometry as geo
from rotdet import losses as ls
from rotdet import numcore as nc
from rotdet.geometry import RotatedBox

rng = np.random.default_rng(1)

a = RotatedBox(0.5, 0.5, 0.4, 0.2, 0.3)
b = RotatedBox(0.55, 0.48, 0.3, 0.25, -0.4)

iou = geo.rotated_iou(a, b)
print(f"exact IoU by Sutherland-Hodgman clipping: {iou:.6f}")

# Sanity-check against brute-force area estimation on a pixel grid.
n = 2000
xs = (np.arange(n) + 0.5) / n
gx, gy = np.meshgrid(xs, xs)
pts = np.stack([gx.ravel(), gy.ravel()], axis=1)


def inside(box):
    d = pts - [box.cx, box.cy]
    c, s = math.cos(box.theta), math.sin(box.theta)
    xl = d[:, 0] * c - d[:, 1] * s
    yl = d[:, 0] * s + d[:, 1] * c
    return (np.abs(xl) <= box.w / 2) & (np.abs(yl) <= box.h / 2)


ia, ib = inside(a), inside(b)
approx = (ia & ib).sum() / (ia | ib).sum()
print(f"grid-count IoU ({n}x{n} samples):          {approx:.6f}")

# The representation ambiguity, in numbers.
swapped = RotatedBox(a.cx, a.cy, a.h, a.w, a.theta - math.pi / 2)
print("\nsame rectangle, two parameter vectors:")
print("  original:", np.round(a.astuple(), 3))
print("  swapped: ", np.round(swapped.astuple(), 3))
print(f"  raw 5-D L1 between them:  {ls.l1_box_loss(a, swapped):.4f}")
print(f"  point set loss:           {ls.point_set_loss(a, swapped):.2e}")
print(f"  IoU (they coincide):      {geo.rotated_iou(a, swapped):.6f}")

# The loss is differentiable through the chosen corner mapping, so it
# can drive a regressor straight through the ambiguity.
p5 = nc.tensor(np.array([[0.52, 0.5, 0.18, 0.42, 0.3 - math.pi / 2]]),
               requires_grad=True)
with nc.Graph() as g:
    loss = ls.point_set_losses(p5, np.array([a.astuple()])).sum()
    nc.backward(g, loss)
print(f"\npoint set loss at a near-swapped prediction: {float(loss.data):.4f}")
print("gradient on the 5 parameters:", np.round(p5.grad[0], 3))
