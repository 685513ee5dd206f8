"""Assignment: Hungarian vs brute force, cost construction, one-to-many."""

import itertools
import math

import numpy as np
import pytest

from rotdet import losses as ls
from rotdet import matching as mt
from rotdet import numcore as nc
from rotdet.geometry import RotatedBox
from rotdet.losses import FocalParams, LossWeights

RNG = np.random.default_rng(404)


def _brute_force(cost):
    n, m = cost.shape
    best, best_pairs = math.inf, []
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(cost[i, j] for i, j in enumerate(perm))
            if total < best - 1e-12:
                best = total
                best_pairs = sorted(enumerate(perm))
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(cost[i, j] for j, i in enumerate(perm))
            if total < best - 1e-12:
                best = total
                best_pairs = sorted((i, j) for j, i in enumerate(perm))
    return best, best_pairs


def test_hungarian_matches_brute_force():
    for trial in range(200):
        n = int(RNG.integers(1, 7))
        m = int(RNG.integers(1, 7))
        cost = RNG.standard_normal((n, m)) * 10
        res = mt.hungarian(cost)
        best, _ = _brute_force(cost)
        assert np.isclose(res.total_cost, best, atol=1e-9), (trial, n, m)
        assert len(res.pairs) == min(n, m)
        rows = [i for i, _ in res.pairs]
        cols = [j for _, j in res.pairs]
        assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)


def test_hungarian_tie_break_lowest_column():
    cost = np.zeros((1, 3))
    assert mt.hungarian(cost).pairs == [(0, 0)]


def test_hungarian_validates():
    with pytest.raises(ValueError):
        mt.hungarian(np.zeros(3))
    with pytest.raises(ValueError):
        mt.hungarian(np.array([[np.nan]]))
    assert mt.hungarian(np.zeros((0, 3))).pairs == []


def test_build_cost_favors_right_class_and_box():
    gt = RotatedBox(0.5, 0.5, 0.3, 0.2, 0.4)
    boxes = nc.tensor(np.array([
        [0.5, 0.5, 0.3, 0.2, 0.4],     # perfect
        [0.8, 0.2, 0.1, 0.1, -0.5],    # wrong place
    ]))
    logits = nc.tensor(np.array([[4.0, -4.0], [4.0, -4.0]]))
    cost = mt.build_cost(logits, boxes, np.array([0]), [gt])
    assert cost.shape == (2, 1)
    assert cost[0, 0] < cost[1, 0]


def test_build_cost_mirrors_loss_terms():
    gt = RotatedBox(0.5, 0.5, 0.3, 0.2, 0.4)
    box = np.array([[0.52, 0.48, 0.28, 0.22, 0.5]])
    logits = np.array([[0.3, -0.7]])
    w = LossWeights()
    cost = mt.build_cost(nc.tensor(logits), nc.tensor(box), np.array([0]),
                         [gt], w)
    from rotdet import geometry as geo
    p = 1 / (1 + math.exp(-0.3))
    fp = FocalParams()
    cls = (fp.alpha * (1 - p) ** fp.gamma * -math.log(p)
           - (1 - fp.alpha) * p ** fp.gamma * -math.log(1 - p))
    reg = ls.POINT_SET_SCALE * ls.point_set_loss(RotatedBox(*box[0]), gt)
    iou = 1.0 - geo.rotated_iou(RotatedBox(*box[0]), gt)
    assert np.isclose(cost[0, 0], w.cls * cls + w.reg * reg + w.iou * iou,
                      atol=1e-9)


def test_o2m_topk_inside():
    # grid of anchor centers; one gt box covering the middle
    xs = (np.arange(8) + 0.5) / 8
    locs = np.stack(np.meshgrid(xs, xs, indexing="ij"),
                    axis=-1).reshape(-1, 2)[:, ::-1]
    gt = RotatedBox(0.5, 0.5, 0.4, 0.3, 0.2)
    res = mt.o2m_assign(locs, [gt], k=4)
    assert res.mode == "O2M"
    assert len(res.pairs) == 4
    # all selected anchors lie inside the box
    for a, j in res.pairs:
        d = locs[a] - [gt.cx, gt.cy]
        c, s = math.cos(gt.theta), math.sin(gt.theta)
        xl = d[0] * c - d[1] * s
        yl = d[0] * s + d[1] * c
        assert abs(xl) <= gt.w / 2 and abs(yl) <= gt.h / 2
    # and they are the k nearest to the center among inside anchors
    dist = np.hypot(*(locs - [gt.cx, gt.cy]).T)
    chosen = {a for a, _ in res.pairs}
    inside = [i for i in range(len(locs))
              if abs((locs[i][0]-gt.cx)*math.cos(gt.theta)
                     - (locs[i][1]-gt.cy)*math.sin(gt.theta)) <= gt.w/2
              and abs((locs[i][0]-gt.cx)*math.sin(gt.theta)
                      + (locs[i][1]-gt.cy)*math.cos(gt.theta)) <= gt.h/2]
    nearest = set(sorted(inside, key=lambda i: (dist[i], i))[:4])
    assert chosen == nearest


def test_o2m_conflict_goes_to_nearest_gt():
    locs = np.array([[0.5, 0.5]])
    g1 = RotatedBox(0.52, 0.5, 0.3, 0.3, 0.0)   # center 0.02 away
    g2 = RotatedBox(0.6, 0.5, 0.4, 0.4, 0.0)    # center 0.1 away
    res = mt.o2m_assign(locs, [g2, g1], k=1)
    assert res.pairs == [(0, 1)]


def test_o2m_validates_k():
    with pytest.raises(ValueError):
        mt.o2m_assign(np.zeros((1, 2)), [], k=0)
