"""Training losses: point set regression, focal classification, 5-D L1,
rotated IoU, and their weighted combination.

Regression targets are plain numpy; predictions may be Tensors, in which
case every loss stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import numcore as nc
from .geometry import AngleRange, RotatedBox
from .numcore import Tensor

__all__ = [
    "LossWeights",
    "FocalParams",
    "point_set_loss",
    "point_set_losses",
    "focal_loss",
    "l1_box_loss",
    "l1_box_losses",
    "rotated_iou_loss",
    "total_loss",
]

BACKGROUND = -1

# the 8 order-preserving bijections of a cyclically ordered 4-set:
# 4 cyclic shifts in each traversal direction
CORNER_MAPPINGS = tuple(
    tuple((i + s) % 4 for i in range(4)) for s in range(4)
) + tuple(
    tuple((s - i) % 4 for i in range(4)) for s in range(4)
)


@dataclass
class LossWeights:
    cls: float = 2.0
    reg: float = 5.0
    iou: float = 2.0


@dataclass
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25


def _as_box5(b) -> np.ndarray:
    if isinstance(b, RotatedBox):
        return np.array([geo._val(f) for f in b.astuple()])
    return np.asarray(b, dtype=np.float64)


# The point set loss sums |dx|+|dy| over 4 corners, so its gradient on
# the box center is 4x the 5-D L1 it substitutes for; training consumers
# average over corners to keep the regression weight commensurate.
POINT_SET_SCALE = 0.25


def point_set_loss(pred, gt):
    """Minimum corner-to-corner L1 distance sum over the 8 mappings.

    Kills the (w,h,theta) <-> (h,w,theta-pi/2) representation ambiguity:
    equivalent representations have identical corner sets up to a cyclic
    shift, so the loss is exactly zero on them.
    """
    if isinstance(pred, RotatedBox) and any(
            isinstance(f, Tensor) for f in pred.astuple()):
        p5 = nc.stack([f if isinstance(f, Tensor) else nc.tensor(f)
                       for f in pred.astuple()]).reshape(1, 5)
        return point_set_losses(p5, _as_box5(gt)[None])[(0,)]
    pc = geo.box_to_corners(pred if isinstance(pred, RotatedBox)
                            else RotatedBox(*_as_box5(pred)))
    gc = geo.box_to_corners(gt if isinstance(gt, RotatedBox)
                            else RotatedBox(*_as_box5(gt)))
    best = np.inf
    for m in CORNER_MAPPINGS:
        best = min(best, float(np.abs(pc - gc[list(m)]).sum()))
    return best


def point_set_losses(pred_boxes: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Vectorized differentiable point set loss for paired boxes [N,5] -> [N].

    The minimizing mapping is chosen numerically; gradients follow the
    selected branch.
    """
    pc = geo.corners_of(pred_boxes)  # [N,4,2]
    gc = np.stack([geo.box_to_corners(RotatedBox(*b)) for b in gt_boxes])
    costs = []
    for m in CORNER_MAPPINGS:
        diff = (pc - gc[:, list(m), :]).abs()
        costs.append(diff.sum(axis=(1, 2)))
    cost_mat = nc.stack(costs, axis=1)  # [N,8]
    pick = np.argmin(cost_mat.data, axis=1)
    onehot = np.zeros_like(cost_mat.data)
    onehot[np.arange(len(pick)), pick] = 1.0
    return (cost_mat * onehot).sum(axis=1)


def focal_loss(logits, targets, params: FocalParams = FocalParams(),
               normalizer: float | None = None):
    """Sigmoid focal loss over [N,C] logits.

    targets: int array of class ids, BACKGROUND (-1) for the all-zero row.
    Summed, then divided by the positive count (min 1) unless `normalizer`
    is given.
    """
    logits = logits if isinstance(logits, Tensor) else nc.tensor(logits)
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.size and targets.max() >= c:
        raise ValueError(f"target id {targets.max()} >= number of classes {c}")
    onehot = np.zeros((n, c))
    pos = targets >= 0
    onehot[np.arange(n)[pos], targets[pos]] = 1.0

    p = logits.sigmoid()
    p = p * (1.0 - 2e-12) + 1e-12  # keep log() finite at saturated logits
    q = 1.0 - p
    loss_pos = -params.alpha * (q ** params.gamma) * p.log()
    loss_neg = -(1.0 - params.alpha) * (p ** params.gamma) * q.log()
    per_elem = loss_pos * onehot + loss_neg * (1.0 - onehot)
    if normalizer is None:
        normalizer = max(int(pos.sum()), 1)
    return per_elem.sum() * (1.0 / normalizer)


def _norm5(box5, angle_range: AngleRange):
    """(cx, cy, w, h, (theta + A/2)/A) -- the uniform regression space."""
    a = angle_range.A
    if isinstance(box5, Tensor):
        scale = np.array([1.0, 1.0, 1.0, 1.0, 1.0 / a])
        shift = np.array([0.0, 0.0, 0.0, 0.0, 0.5])
        return box5 * scale + shift
    b = np.asarray(box5, dtype=np.float64).copy()
    b[..., 4] = b[..., 4] / a + 0.5
    return b


def l1_box_loss(pred, gt, angle_range: AngleRange = AngleRange()):
    """Sum of absolute differences over the 5 normalized components."""
    if isinstance(pred, RotatedBox) and any(
            isinstance(f, Tensor) for f in pred.astuple()):
        p5 = nc.stack([f if isinstance(f, Tensor) else nc.tensor(f)
                       for f in pred.astuple()]).reshape(1, 5)
        return l1_box_losses(p5, _as_box5(gt)[None], angle_range)[(0,)]
    return float(np.abs(_norm5(_as_box5(pred), angle_range)
                        - _norm5(_as_box5(gt), angle_range)).sum())


def l1_box_losses(pred_boxes: Tensor, gt_boxes: np.ndarray,
                  angle_range: AngleRange = AngleRange()) -> Tensor:
    """Vectorized differentiable 5-D L1 for paired boxes [N,5] -> [N]."""
    return (_norm5(pred_boxes, angle_range)
            - _norm5(np.asarray(gt_boxes), angle_range)).abs().sum(axis=1)


def rotated_iou_loss(pred, gt):
    """1 - rotated IoU; differentiable through the clipping pipeline."""
    p = pred if isinstance(pred, RotatedBox) else RotatedBox(*np.asarray(pred))
    g = gt if isinstance(gt, RotatedBox) else RotatedBox(*_as_box5(gt))
    return 1.0 - geo.rotated_iou(p, g)


def _tensor_box(boxes: Tensor, i: int) -> RotatedBox:
    return RotatedBox(boxes[(i, 0)], boxes[(i, 1)], boxes[(i, 2)],
                      boxes[(i, 3)], boxes[(i, 4)])


def total_loss(pred_logits: Tensor, pred_boxes: Tensor, gt_classes,
               gt_boxes, match, weights: LossWeights = LossWeights(),
               focal: FocalParams = FocalParams(),
               angle_range: AngleRange = AngleRange(),
               use_point_set: bool = True):
    """Weighted matched loss: cls * focal + reg * point-set + iou * (1-IoU).

    `match` is a MatchResult (or a bare list of (pred, gt) index pairs).
    Unmatched predictions contribute classification-as-background only.
    Returns (scalar Tensor, breakdown dict of floats).
    """
    pairs = getattr(match, "pairs", match)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.stack([_as_box5(b) for b in gt_boxes]) if len(gt_boxes) \
        else np.zeros((0, 5))
    n = pred_logits.shape[0]

    targets = np.full(n, BACKGROUND, dtype=np.int64)
    for pi, gi in pairs:
        targets[pi] = gt_classes[gi]
    n_match = max(len(pairs), 1)
    cls_term = focal_loss(pred_logits, targets, focal, normalizer=n_match)

    if pairs:
        p_idx = np.array([pi for pi, _ in pairs])
        g_idx = np.array([gi for _, gi in pairs])
        matched_pred = pred_boxes[(p_idx,)]
        matched_gt = gt_boxes[g_idx]
        if use_point_set:
            reg_term = point_set_losses(matched_pred, matched_gt).sum() \
                * (POINT_SET_SCALE / n_match)
        else:
            reg_term = l1_box_losses(matched_pred, matched_gt,
                                     angle_range).sum() * (1.0 / n_match)
        iou_terms = [rotated_iou_loss(_tensor_box(pred_boxes, pi),
                                      RotatedBox(*gt_boxes[gi]))
                     for pi, gi in pairs]
        iou_term = nc.stack([t if isinstance(t, Tensor) else nc.tensor(t)
                             for t in iou_terms]).sum() * (1.0 / n_match)
    else:
        reg_term = nc.tensor(0.0)
        iou_term = nc.tensor(0.0)

    total = weights.cls * cls_term + weights.reg * reg_term \
        + weights.iou * iou_term
    breakdown = {
        "cls": float(cls_term.data),
        "reg": float(reg_term.data),
        "iou": float(iou_term.data),
        "total": float(total.data),
    }
    return total, breakdown
