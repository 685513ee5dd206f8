"""Rotated-box algebra against geometric oracles."""

import math
import warnings

import numpy as np
import pytest

from rotdet import geometry as geo
from rotdet import numcore as nc
from rotdet.geometry import RotatedBox, canonicalize, rotated_iou
from rotdet.numcore import Tensor

RNG = np.random.default_rng(77)


def _random_box(rng):
    return RotatedBox(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75),
                      rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4),
                      rng.uniform(-math.pi / 2, math.pi / 2))


def _mc_iou(a, b, n=200_000, rng=None):
    """Monte-Carlo IoU oracle: uniform samples over the joint AABB."""
    rng = rng or np.random.default_rng(0)
    ca = geo.box_to_corners(a)
    cb = geo.box_to_corners(b)
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    pts = rng.uniform(lo, hi, (n, 2))

    def inside(box):
        d = pts - [box.cx, box.cy]
        c, s = math.cos(box.theta), math.sin(box.theta)
        xl = d[:, 0] * c - d[:, 1] * s
        yl = d[:, 0] * s + d[:, 1] * c
        return (np.abs(xl) <= box.w / 2) & (np.abs(yl) <= box.h / 2)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


def test_canonicalize_preserves_point_set():
    for _ in range(200):
        b = _random_box(RNG)
        shifted = RotatedBox(b.cx, b.cy, b.w, b.h,
                             b.theta + int(RNG.integers(-3, 4)) * math.pi)
        c = canonicalize(shifted)
        assert -math.pi / 2 <= c.theta < math.pi / 2
        # same point set: corners match up to cyclic shift
        ca = geo.box_to_corners(b)
        cc = geo.box_to_corners(c)
        best = min(np.abs(ca - np.roll(cc, k, axis=0)).max()
                   for k in range(4))
        assert best < 1e-9


def test_canonicalize_idempotent_and_validates():
    b = canonicalize(RotatedBox(0.5, 0.5, 0.2, 0.1, 2.0))
    b2 = canonicalize(b)
    assert b.theta == b2.theta
    with pytest.raises(ValueError):
        canonicalize(RotatedBox(0.5, 0.5, -0.1, 0.2, 0.0))


def test_corners_axis_aligned():
    b = RotatedBox(0.5, 0.5, 0.4, 0.2, 0.0)
    c = geo.box_to_corners(b)
    np.testing.assert_allclose(
        c, [[0.3, 0.4], [0.7, 0.4], [0.7, 0.6], [0.3, 0.6]], atol=1e-12)


def test_corners_rotation_direction():
    # theta=pi/2: local +x maps to (0, -1) in image coords (y down)
    b = RotatedBox(0.0, 0.0, 2.0, 0.1, math.pi / 2)
    c = geo.box_to_corners(b)
    # the (+w/2, -h/2) corner should sit near (x=-0.05, y=-1)
    assert abs(c[1][0] - (-0.05)) < 1e-9
    assert abs(c[1][1] - (-1.0)) < 1e-9


def test_corners_of_matches_scalar():
    boxes = np.stack([np.array(
        [b.cx, b.cy, b.w, b.h, b.theta]) for b in
        (_random_box(RNG) for _ in range(16))])
    batch = geo.corners_of(nc.tensor(boxes)).data
    for i in range(len(boxes)):
        np.testing.assert_allclose(batch[i],
                                   geo.box_to_corners(RotatedBox(*boxes[i])),
                                   atol=1e-12)


def test_rotate_offsets_matches_matrix():
    dp = RNG.standard_normal((5, 2))
    th = 0.7
    out = geo.rotate_offsets(dp, th)
    c, s = math.cos(th), math.sin(th)
    ref = dp @ np.array([[c, -s], [s, c]])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_iou_identity_and_disjoint():
    b = RotatedBox(0.5, 0.5, 0.3, 0.2, 0.8)
    assert np.isclose(rotated_iou(b, b), 1.0, atol=1e-12)
    far = RotatedBox(5.0, 5.0, 0.3, 0.2, 0.1)
    assert rotated_iou(b, far) == 0.0


def test_iou_known_overlap():
    # two unit squares overlapping by half
    a = RotatedBox(0.0, 0.0, 1.0, 1.0, 0.0)
    b = RotatedBox(0.5, 0.0, 1.0, 1.0, 0.0)
    assert np.isclose(rotated_iou(a, b), 0.5 / 1.5, atol=1e-12)


def test_iou_cross_rotation():
    # square vs the same square rotated 45 degrees: octagon intersection
    a = RotatedBox(0.0, 0.0, 1.0, 1.0, 0.0)
    b = RotatedBox(0.0, 0.0, 1.0, 1.0, math.pi / 4)
    # analytic: regular octagon area = 2*(sqrt(2)-1)
    inter = 2 * (math.sqrt(2) - 1)
    expect = inter / (2 - inter)
    assert np.isclose(rotated_iou(a, b), expect, atol=1e-12)


def test_iou_monte_carlo_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        a = _random_box(rng)
        b = _random_box(rng)
        exact = rotated_iou(a, b)
        approx = _mc_iou(a, b, rng=np.random.default_rng(11))
        assert abs(exact - approx) < 7e-3


def test_iou_symmetry_and_range():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = _random_box(rng), _random_box(rng)
        iab = rotated_iou(a, b)
        iba = rotated_iou(b, a)
        assert np.isclose(iab, iba, atol=1e-9)
        assert 0.0 <= iab <= 1.0


def test_iou_degenerate_warns():
    a = RotatedBox(0.5, 0.5, 1e-9, 1e-9, 0.0)
    b = RotatedBox(0.5, 0.5, 0.2, 0.2, 0.0)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        assert rotated_iou(a, b) == 0.0
    assert any("degenerate" in str(w.message) for w in rec)


def test_iou_differentiable_and_gradchecks():
    rng = np.random.default_rng(21)
    for _ in range(10):
        vals = [rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65),
                rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4),
                rng.uniform(-1.2, 1.2)]
        fields = nc.tensor(np.array(vals), requires_grad=True)
        gt = _random_box(rng)

        def f(t):
            box = RotatedBox(t[(0,)], t[(1,)], t[(2,)], t[(3,)], t[(4,)])
            out = rotated_iou(box, gt)
            return out if isinstance(out, Tensor) else nc.tensor(out)

        if float(f(fields).data) in (0.0, 1.0):
            continue  # flat or clipped region, nothing to check
        err = nc.gradcheck(f, [fields], rng)
        assert err < 1e-5


def test_iou_no_overlap_tensor_returns_tensor():
    a = RotatedBox(nc.tensor(0.1), nc.tensor(0.1), nc.tensor(0.05),
                   nc.tensor(0.05), nc.tensor(0.0))
    b = RotatedBox(0.9, 0.9, 0.05, 0.05, 0.0)
    out = rotated_iou(a, b)
    assert isinstance(out, Tensor)
    assert float(out.data) == 0.0
