"""Average precision for rotated detections.

Greedy confidence-ordered matching per class and IoU threshold, 101-point
interpolated AP (COCO convention) with an 11-point VOC-07 option.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import geometry as geo
from ..geometry import RotatedBox

__all__ = ["Detection", "EvalReport", "evaluate", "average_precision"]

IOU_5095 = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class Detection:
    score: float
    cls: int
    box: RotatedBox


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    ap5095: float
    per_class: dict = field(default_factory=dict)  # cls -> AP50
    containment: float | None = None

    def as_dict(self) -> dict:
        d = {"ap50": self.ap50, "ap75": self.ap75, "ap5095": self.ap5095,
             "per_class": {str(k): v for k, v in self.per_class.items()}}
        if self.containment is not None:
            d["containment"] = self.containment
        return d


def _interp_ap(recall: np.ndarray, precision: np.ndarray,
               n_points: int) -> float:
    """Max-precision-to-the-right interpolation on a fixed recall grid."""
    # running max of precision from the right
    prec = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, n_points)
    out = np.zeros(n_points)
    for i, r in enumerate(grid):
        ok = recall >= r - 1e-12
        out[i] = prec[ok].max() if ok.any() else 0.0
    return float(out.mean())


def average_precision(scores, hits, n_gt: int, voc11: bool = False) -> float:
    """AP from per-detection (score, hit) pairs against n_gt ground truths.

    Detections are ranked by descending score with stable index tie-break.
    Empty-gt rule: no gts and no detections -> 1.0; no gts but detections
    exist -> 0.0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(hits, dtype=bool)
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(hits[order])
    fp = np.cumsum(~hits[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return _interp_ap(recall, precision, 11 if voc11 else 101)


def _match_image(dets, gts, thr: float):
    """Greedy matching inside one image; returns hit flag per detection.

    Detections must already be sorted by descending score. Each detection
    claims its highest-IoU unmatched gt of the same class at IoU >= thr.
    """
    taken = [False] * len(gts)
    hits = []
    for det in dets:
        best, best_iou = -1, -1.0
        for gi, (gb, gc) in enumerate(gts):
            if taken[gi] or gc != det.cls:
                continue
            iou = geo.rotated_iou(det.box, gb)
            # strict '>' keeps the earliest gt on exact IoU ties
            if iou >= thr and iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            taken[best] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits


def evaluate(all_preds, all_gts, iou_thresholds=IOU_5095,
             voc11: bool = False) -> EvalReport:
    """Corpus-level AP. `all_preds[i]` is the Detection list of image i,
    `all_gts[i]` its [(RotatedBox, class)] list.
    """
    if len(all_preds) != len(all_gts):
        raise ValueError("prediction and gt lists differ in length")
    classes = sorted({c for gts in all_gts for _, c in gts} |
                     {d.cls for dets in all_preds for d in dets})
    ap_at: dict[float, dict[int, float]] = {}
    for thr in iou_thresholds:
        per_cls = {}
        for cls in classes:
            scores, hits = [], []
            n_gt = 0
            for dets, gts in zip(all_preds, all_gts):
                cg = [(b, c) for b, c in gts if c == cls]
                n_gt += len(cg)
                cd = [d for d in dets if d.cls == cls]
                order = np.argsort([-d.score for d in cd], kind="stable")
                cd = [cd[i] for i in order]
                img_hits = _match_image(cd, cg, thr)
                scores.extend(d.score for d in cd)
                hits.extend(img_hits)
            per_cls[cls] = average_precision(scores, hits, n_gt, voc11)
        ap_at[thr] = per_cls

    def mean_ap(thr):
        vals = list(ap_at[thr].values())
        return float(np.mean(vals)) if vals else 1.0

    ap50 = mean_ap(0.5) if 0.5 in ap_at else 0.0
    ap75 = mean_ap(0.75) if 0.75 in ap_at else 0.0
    ap5095 = float(np.mean([mean_ap(t) for t in iou_thresholds]))
    per_class = dict(ap_at.get(0.5, {}))
    return EvalReport(ap50, ap75, ap5095, per_class)
