"""Label assignment: Hungarian one-to-one matching over the combined
set-prediction cost, plus a simplified center-top-k one-to-many assigner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import losses
from .geometry import RotatedBox
from .losses import FocalParams, LossWeights
from .numcore import Tensor

__all__ = ["MatchResult", "hungarian", "build_cost", "o2m_assign"]


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred index, gt index)
    total_cost: float = 0.0
    mode: str = "O2O"


def _solve_rows_le_cols(cost: np.ndarray):
    """Potential-based augmenting-path assignment, rows <= cols.

    Returns col_of_row. Columns are scanned in ascending index with strict
    '<' updates, so ties resolve to the lowest column.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m)
    p = np.full(m + 1, n, dtype=np.int64)  # col -> assigned row (n = free)
    for i in range(n):
        p[m] = i
        j0 = m
        minv = np.full(m, math.inf)
        used = np.zeros(m + 1, dtype=bool)
        prev = np.full(m, m, dtype=np.int64)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0] - u[i0] - v
            upd = ~used[:m] & (cur < minv)
            minv[upd] = cur[upd]
            prev[upd] = j0
            reach = np.where(used[:m], math.inf, minv)
            j1 = int(reach.argmin())
            delta = reach[j1]
            u[p[used]] += delta
            v[used[:m]] -= delta
            minv[~used[:m]] -= delta
            j0 = j1
            if p[j0] == n:
                break
        while j0 != m:
            j1 = int(prev[j0])
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(m):
        if p[j] != n:
            col_of_row[p[j]] = j
    return col_of_row


def hungarian(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of a (possibly non-square) matrix.

    Rows are predictions, columns ground truths; |pairs| = min(rows, cols).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], 0.0, "O2O")
    transposed = n > m
    work = cost.T.copy() if transposed else cost
    col_of_row = _solve_rows_le_cols(np.ascontiguousarray(work))
    if transposed:
        pairs = [(int(j), int(i)) for i, j in enumerate(col_of_row)]
    else:
        pairs = [(int(i), int(j)) for i, j in enumerate(col_of_row)]
    pairs.sort()
    total = float(sum(cost[i, j] for i, j in pairs))
    return MatchResult(pairs, total, "O2O")


def _cls_cost(prob: np.ndarray, params: FocalParams) -> np.ndarray:
    """Focal-style classification cost at the gt class probability."""
    p = np.clip(prob, 1e-12, 1.0 - 1e-12)
    pos = params.alpha * (1.0 - p) ** params.gamma * (-np.log(p))
    neg = (1.0 - params.alpha) * p ** params.gamma * (-np.log(1.0 - p))
    return pos - neg


def build_cost(pred_logits, pred_boxes, gt_classes, gt_boxes,
               weights: LossWeights = LossWeights(),
               focal: FocalParams = FocalParams(),
               use_point_set: bool = True) -> np.ndarray:
    """Cost matrix mirroring the loss terms; no gradients flow through it."""
    logits = pred_logits.data if isinstance(pred_logits, Tensor) \
        else np.asarray(pred_logits)
    boxes = pred_boxes.data if isinstance(pred_boxes, Tensor) \
        else np.asarray(pred_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    n = logits.shape[0]
    m = len(gt_classes)
    cost = np.zeros((n, m))
    if m == 0 or n == 0:
        return cost
    prob = 1.0 / (1.0 + np.exp(-logits))
    gt5 = np.stack([losses._as_box5(b) for b in gt_boxes])
    for j in range(m):
        cls_c = _cls_cost(prob[:, gt_classes[j]], focal)
        g = RotatedBox(*gt5[j])
        for i in range(n):
            b = RotatedBox(*boxes[i])
            reg_c = losses.POINT_SET_SCALE * losses.point_set_loss(b, g) \
                if use_point_set else losses.l1_box_loss(b, g)
            iou_c = 1.0 - geo.rotated_iou(b, g)
            cost[i, j] = (weights.cls * cls_c[i] + weights.reg * reg_c
                          + weights.iou * iou_c)
    return cost


def o2m_assign(anchor_locations, gt_boxes, k: int = 9) -> MatchResult:
    """Center-based top-k one-to-many assignment.

    For each gt, the k anchor locations whose centers lie inside the box and
    are nearest its center become positives. An anchor claimed by several
    gts goes to the one with the nearest center. Simplified stand-in for
    IoU-statistics-based one-to-many schemes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    locs = np.asarray(anchor_locations, dtype=np.float64)
    claimed: dict[int, tuple[float, int]] = {}  # anchor -> (dist, gt)
    for j, g in enumerate(gt_boxes):
        g5 = losses._as_box5(g)
        cx, cy, w, h, th = g5
        d = locs - [cx, cy]
        c, s = math.cos(th), math.sin(th)
        xl = d[:, 0] * c - d[:, 1] * s
        yl = d[:, 0] * s + d[:, 1] * c
        inside = (np.abs(xl) <= w / 2) & (np.abs(yl) <= h / 2)
        if not inside.any():
            continue
        dist = np.hypot(d[:, 0], d[:, 1])
        cand = np.flatnonzero(inside)
        order = cand[np.lexsort((cand, dist[cand]))][:k]
        for a in order:
            a = int(a)
            if a not in claimed or dist[a] < claimed[a][0]:
                claimed[a] = (float(dist[a]), j)
    pairs = sorted((a, gj) for a, (_, gj) in claimed.items())
    return MatchResult(pairs, 0.0, "O2M")
