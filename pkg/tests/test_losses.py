"""Loss terms: closed-form focal values, point set ambiguity, vectorized
vs scalar agreement, and the weighted combination."""

import math

import numpy as np
import pytest

from rotdet import losses as ls
from rotdet import numcore as nc
from rotdet.geometry import AngleRange, RotatedBox
from rotdet.losses import (FocalParams, LossWeights, focal_loss, l1_box_loss,
                           point_set_loss, point_set_losses, total_loss)
from rotdet.matching import MatchResult

RNG = np.random.default_rng(31)


def _random_box(rng):
    return RotatedBox(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                      rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4),
                      rng.uniform(-math.pi / 2, math.pi / 2))


def _swap_repr(b):
    t = b.theta - math.pi / 2
    if t < -math.pi / 2:
        t += math.pi
    return RotatedBox(b.cx, b.cy, b.h, b.w, t)


def test_point_set_zero_on_identical():
    b = _random_box(RNG)
    assert point_set_loss(b, b) == 0.0


def test_point_set_zero_on_swapped_representation():
    for _ in range(300):
        b = _random_box(RNG)
        assert point_set_loss(b, _swap_repr(b)) < 1e-9


def test_point_set_symmetric():
    for _ in range(50):
        a, b = _random_box(RNG), _random_box(RNG)
        assert np.isclose(point_set_loss(a, b), point_set_loss(b, a),
                          atol=1e-12)


def test_point_set_l1_discontinuity_example():
    # same box, angle near the two ends of the canonical range: tiny
    # point-set loss, large plain L1 angle difference
    a = RotatedBox(0.5, 0.5, 0.3, 0.1, math.pi / 2 - 1e-3)
    b = RotatedBox(0.5, 0.5, 0.3, 0.1, -math.pi / 2 + 1e-3)
    assert point_set_loss(a, b) < 0.01
    assert l1_box_loss(a, b) > 0.5


def test_point_set_vectorized_matches_scalar():
    boxes = np.stack([[b.cx, b.cy, b.w, b.h, b.theta]
                      for b in (_random_box(RNG) for _ in range(40))])
    gts = np.stack([[b.cx, b.cy, b.w, b.h, b.theta]
                    for b in (_random_box(RNG) for _ in range(40))])
    vec = point_set_losses(nc.tensor(boxes), gts).data
    for i in range(40):
        scalar = point_set_loss(RotatedBox(*boxes[i]), RotatedBox(*gts[i]))
        assert np.isclose(vec[i], scalar, atol=1e-12)


def test_point_set_gradient():
    boxes = nc.tensor(np.array([[0.5, 0.5, 0.3, 0.2, 0.4],
                                [0.4, 0.6, 0.2, 0.1, -0.8]]),
                      requires_grad=True)
    gts = np.array([[0.55, 0.45, 0.25, 0.22, 0.5],
                    [0.38, 0.62, 0.18, 0.12, -0.7]])
    err = nc.gradcheck(lambda b: point_set_losses(b, gts).sum(), [boxes], RNG)
    assert err < 1e-6


def test_focal_closed_form():
    # one positive row, p = 0.5 for the target class, other logits -inf-ish
    logits = nc.tensor(np.array([[0.0, -40.0]]))
    out = focal_loss(logits, np.array([0]), FocalParams(2.0, 0.25))
    # positive: 0.25 * 0.5^2 * ln 2; negative term vanishes at p ~ 0
    assert np.isclose(float(out.data), 0.25 * 0.25 * math.log(2.0),
                      atol=1e-9)


def test_focal_background_row():
    logits = nc.tensor(np.array([[0.0, 0.0]]))
    out = focal_loss(logits, np.array([ls.BACKGROUND]), FocalParams(2.0, 0.25))
    # all-negative: 2 * (1-0.25) * 0.5^2 * ln 2, normalizer max(pos,1)=1
    assert np.isclose(float(out.data), 2 * 0.75 * 0.25 * math.log(2.0),
                      atol=1e-9)


def test_focal_rejects_bad_class():
    with pytest.raises(ValueError):
        focal_loss(nc.tensor(np.zeros((1, 2))), np.array([5]))


def test_focal_gradient_at_saturation():
    logits = nc.tensor(np.array([[30.0, -30.0], [-30.0, 30.0]]),
                       requires_grad=True)
    with nc.Graph() as g:
        out = focal_loss(logits, np.array([0, 0]))
        nc.backward(g, out)
    assert np.isfinite(logits.grad).all()


def test_l1_normalizes_angle():
    a = RotatedBox(0.5, 0.5, 0.3, 0.2, 0.0)
    b = RotatedBox(0.5, 0.5, 0.3, 0.2, math.pi / 2)
    # angle difference pi/2 -> 0.5 in units of the angle range
    assert np.isclose(l1_box_loss(a, b), 0.5, atol=1e-12)


def test_total_loss_perfect_prediction_near_zero():
    gt = [_random_box(RNG)]
    boxes = nc.tensor(np.array([[gt[0].cx, gt[0].cy, gt[0].w, gt[0].h,
                                 gt[0].theta]]))
    logits = nc.tensor(np.array([[40.0, -40.0]]))
    out, bd = total_loss(logits, boxes, np.array([0]), gt,
                         MatchResult([(0, 0)], 0.0, "O2O"))
    assert bd["total"] < 1e-6


def test_total_loss_weights_applied():
    gt = [RotatedBox(0.5, 0.5, 0.3, 0.2, 0.0)]
    boxes = nc.tensor(np.array([[0.52, 0.5, 0.3, 0.2, 0.0]]))
    logits = nc.tensor(np.array([[0.0]]))
    w = LossWeights(cls=2.0, reg=5.0, iou=2.0)
    out, bd = total_loss(logits, boxes, np.array([0]), gt,
                         [(0, 0)], weights=w)
    expect = 2 * bd["cls"] + 5 * bd["reg"] + 2 * bd["iou"]
    assert np.isclose(bd["total"], expect, atol=1e-9)
    assert np.isclose(float(out.data), expect, atol=1e-9)


def test_total_loss_no_matches_cls_only():
    boxes = nc.tensor(np.array([[0.5, 0.5, 0.3, 0.2, 0.0]]))
    logits = nc.tensor(np.array([[0.0]]))
    out, bd = total_loss(logits, boxes, np.array([], dtype=np.int64), [],
                         MatchResult([], 0.0, "O2O"))
    assert bd["reg"] == 0.0 and bd["iou"] == 0.0 and bd["cls"] > 0.0


def test_total_loss_gradient_flows_to_boxes():
    gt = [RotatedBox(0.55, 0.45, 0.25, 0.2, 0.3)]
    boxes = nc.tensor(np.array([[0.5, 0.5, 0.3, 0.2, 0.0]]),
                      requires_grad=True)
    logits = nc.tensor(np.array([[0.0]]), requires_grad=True)
    with nc.Graph() as g:
        out, _ = total_loss(logits, boxes, np.array([0]), gt, [(0, 0)])
        nc.backward(g, out)
    assert np.any(boxes.grad) and np.any(logits.grad)
