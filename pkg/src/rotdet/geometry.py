"""Rotated-box algebra: canonical form, corners, offset rotation, exact IoU.

Convention (shared with numcore.bilinear_sample): x rightward, y downward,
coordinates normalized to [0,1]. Angles in radians; canonical range
[-pi/2, pi/2). The rotation matrix follows R(theta) with rows
(cos, -sin) / (sin, cos) transposed, applied to row vectors, so a local
corner (xl, yl) maps to (xl*cos + yl*sin, -xl*sin + yl*cos).

All functions accept box fields as plain floats or 0-d numcore Tensors;
with Tensor fields the outputs stay differentiable (polygon clipping
branches are resolved numerically, gradients follow the selected topology).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

__all__ = [
    "RotatedBox",
    "AngleRange",
    "canonicalize",
    "box_to_corners",
    "corners_of",
    "rotate_offsets",
    "rotated_iou",
    "polygon_area",
]

_DEGENERATE_AREA = 1e-12

# local corner sign pattern, cyclic starting at (-w/2, -h/2)
_SX = (-1.0, 1.0, 1.0, -1.0)
_SY = (-1.0, -1.0, 1.0, 1.0)


@dataclass
class RotatedBox:
    """5-DoF oriented box: center, extents (both > 0), angle in radians."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def astuple(self):
        return (self.cx, self.cy, self.w, self.h, self.theta)

    def area(self):
        return self.w * self.h


@dataclass
class AngleRange:
    """Pre-defined angle span; boxes live in [-A/2, A/2)."""

    A: float = math.pi

    def __post_init__(self):
        if self.A <= 0:
            raise ValueError("angle range must be positive")


def _val(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _sin(x):
    return x.sin() if isinstance(x, Tensor) else math.sin(x)


def _cos(x):
    return x.cos() if isinstance(x, Tensor) else math.cos(x)


def _check_extents(b: RotatedBox):
    if _val(b.w) <= 0 or _val(b.h) <= 0:
        raise ValueError(f"box extents must be positive, got w={_val(b.w)} h={_val(b.h)}")


def canonicalize(b: RotatedBox) -> RotatedBox:
    """Shift theta by a multiple of pi into [-pi/2, pi/2).

    A rectangle is invariant under rotation by pi, so the returned box is
    the identical point set with unchanged extents. Idempotent.
    """
    _check_extents(b)
    t = _val(b.theta)
    k = math.floor((t + math.pi / 2) / math.pi)
    if k == 0:
        return RotatedBox(b.cx, b.cy, b.w, b.h, b.theta)
    return RotatedBox(b.cx, b.cy, b.w, b.h, b.theta - k * math.pi)


def _corner_pairs(b: RotatedBox):
    """Corners as a list of four (x, y) scalars in fixed cyclic order."""
    c, s = _cos(b.theta), _sin(b.theta)
    out = []
    for sx, sy in zip(_SX, _SY):
        xl = 0.5 * sx * b.w
        yl = 0.5 * sy * b.h
        out.append((b.cx + xl * c + yl * s, b.cy - xl * s + yl * c))
    return out


def box_to_corners(b: RotatedBox) -> np.ndarray:
    """Corner quad [4,2], cyclic from the local (-w/2, -h/2) corner."""
    _check_extents(b)
    pairs = _corner_pairs(b)
    return np.array([[_val(x), _val(y)] for x, y in pairs])


def corners_of(boxes: Tensor) -> Tensor:
    """Differentiable corners for a batch of boxes [N,5] -> [N,4,2]."""
    cx = boxes[(slice(None), 0)].reshape(-1, 1)
    cy = boxes[(slice(None), 1)].reshape(-1, 1)
    w = boxes[(slice(None), 2)].reshape(-1, 1)
    h = boxes[(slice(None), 3)].reshape(-1, 1)
    th = boxes[(slice(None), 4)].reshape(-1, 1)
    c, s = th.cos(), th.sin()
    sx = np.array(_SX)
    sy = np.array(_SY)
    xl = 0.5 * (w * sx)
    yl = 0.5 * (h * sy)
    x = cx + xl * c + yl * s
    y = cy - xl * s + yl * c
    return nc.stack([x, y], axis=2)


def rotate_offsets(dp, theta):
    """Rotate offset rows by theta: each row v maps to v @ R^T(theta).

    Differentiable in both dp and theta when either is a Tensor.
    """
    if isinstance(theta, Tensor):
        c, s = theta.cos(), theta.sin()
        row0 = nc.stack([c, -s])
        row1 = nc.stack([s, c])
        rt = nc.stack([row0, row1])
        return nc.matmul(dp, rt)
    c, s = math.cos(theta), math.sin(theta)
    rt = np.array([[c, -s], [s, c]])
    if isinstance(dp, Tensor):
        return nc.matmul(dp, rt)
    return np.asarray(dp) @ rt


def _cross(ox, oy, ax, ay, bx, by):
    """z of (a - o) x (b - o)."""
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


def polygon_area(poly) -> float:
    """Absolute shoelace area of a list of (x, y) scalars."""
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc = acc + (x1 * y2 - x2 * y1)
    half = acc * 0.5
    return half.abs() if isinstance(half, Tensor) else abs(half)


def _clip_by_edge(poly, ax, ay, bx, by, sign):
    """One Sutherland-Hodgman pass against the half-plane of edge a->b."""
    out = []
    n = len(poly)
    for i in range(n):
        s = poly[i]
        p = poly[(i + 1) % n]
        ds = _cross(ax, ay, bx, by, s[0], s[1]) * sign
        dp = _cross(ax, ay, bx, by, p[0], p[1]) * sign
        vs, vp = _val(ds), _val(dp)
        s_in, p_in = vs >= 0.0, vp >= 0.0
        if s_in:
            out.append(s)
        if s_in != p_in:
            if isinstance(ds, Tensor) or isinstance(dp, Tensor):
                t = ds * ((ds - dp) ** -1.0)
            else:
                t = vs / (vs - vp)
            out.append((s[0] + t * (p[0] - s[0]), s[1] + t * (p[1] - s[1])))
    return out


def _signed_area_value(poly) -> float:
    acc = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += _val(x1) * _val(y2) - _val(x2) * _val(y1)
    return 0.5 * acc


def intersect_quads(pa, pb):
    """Clip quad pa by convex quad pb; both as lists of (x, y) scalars."""
    sign = 1.0 if _signed_area_value(pb) >= 0 else -1.0
    poly = list(pa)
    n = len(pb)
    for i in range(n):
        if not poly:
            break
        ax, ay = pb[i]
        bx, by = pb[(i + 1) % n]
        poly = _clip_by_edge(poly, ax, ay, bx, by, sign)
    return poly


def rotated_iou(a: RotatedBox, b: RotatedBox):
    """Exact rotated IoU via convex polygon clipping, in [0, 1].

    Returns a float for float boxes, a differentiable scalar Tensor when any
    field is a Tensor. Near-zero-area boxes return 0 with a warning.
    """
    _check_extents(a)
    _check_extents(b)
    area_a = _val(a.w) * _val(a.h)
    area_b = _val(b.w) * _val(b.h)
    if area_a < _DEGENERATE_AREA or area_b < _DEGENERATE_AREA:
        warnings.warn("rotated_iou: degenerate (near-zero area) box, returning 0")
        return 0.0
    pa = _corner_pairs(a)
    pb = _corner_pairs(b)
    inter_poly = intersect_quads(pa, pb)
    if len(inter_poly) < 3:
        tensor_in = any(isinstance(f, Tensor) for f in a.astuple() + b.astuple())
        return Tensor(0.0) if tensor_in else 0.0
    inter = polygon_area(inter_poly)
    union = a.w * a.h + b.w * b.h - inter
    iou = inter * (union ** -1.0) if isinstance(union, Tensor) else inter / union
    if not isinstance(iou, Tensor):
        iou = min(max(iou, 0.0), 1.0)
    return iou
