"""Procedural scenes: filled rotated rectangles on a noise background.

Classes differ in both fill color and shape statistics, so classification
and rotated regression are each learnable. The "dense" preset packs
parallel thin bars, the hardest layout for axis-aligned reasoning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import geometry as geo
from ..geometry import RotatedBox

__all__ = ["SceneParams", "SyntheticScene", "gen_scene"]

# per-class fill colors and (w, h) ranges; class 1 is the thin-bar class
_COLORS = np.array([
    [0.85, 0.30, 0.25],
    [0.25, 0.80, 0.35],
    [0.30, 0.40, 0.90],
    [0.85, 0.80, 0.25],
])
_WH_RANGES = (
    ((0.18, 0.34), (0.12, 0.22)),
    ((0.26, 0.44), (0.05, 0.10)),
    ((0.10, 0.18), (0.08, 0.16)),
    ((0.20, 0.30), (0.16, 0.26)),
)

_SUPERSAMPLE = 3
_MAX_TRIES = 40


@dataclass
class SceneParams:
    size: int = 64
    density: int = 3              # requested target count
    num_classes: int = 3
    overlap_cap: float = 0.05     # max pairwise gt IoU
    noise: float = 0.08           # background noise amplitude
    background: float = 0.35
    margin: float = 0.02          # corners stay inside [margin, 1-margin]
    dense: bool = False           # parallel thin-bar preset
    clutter: int | None = None    # unlabeled distractor count; None ->
                                  # density when dense, else 0

    def __post_init__(self):
        if self.density < 0:
            raise ValueError("density must be >= 0")
        if not 1 <= self.num_classes <= len(_COLORS):
            raise ValueError(f"num_classes must be in 1..{len(_COLORS)}")
        if not 0.0 <= self.overlap_cap <= 1.0:
            raise ValueError("overlap_cap must be in [0, 1]")


@dataclass
class SyntheticScene:
    image: np.ndarray                       # [3, H, W] in [0, 1]
    gts: list                               # [(RotatedBox, class id), ...]
    params: SceneParams = field(default_factory=SceneParams)


def _corners_inside(b: RotatedBox, margin: float) -> bool:
    c = geo.box_to_corners(b)
    return bool((c >= margin).all() and (c <= 1.0 - margin).all())


def _sample_box(rng: np.random.Generator, cls: int,
                params: SceneParams) -> RotatedBox:
    (wlo, whi), (hlo, hhi) = _WH_RANGES[cls]
    w = rng.uniform(wlo, whi)
    h = rng.uniform(hlo, hhi)
    theta = rng.uniform(-math.pi / 2, math.pi / 2)
    half = 0.5 * math.hypot(w, h) + params.margin
    cx = rng.uniform(half, 1.0 - half) if half < 0.5 else 0.5
    cy = rng.uniform(half, 1.0 - half) if half < 0.5 else 0.5
    return RotatedBox(cx, cy, w, h, theta)


def _dense_boxes(rng: np.random.Generator, params: SceneParams):
    """Parallel thin bars of the bar class, stacked along their normal.

    Orientations are biased toward the +-pi/2 canonical boundary, where
    the naive 5-component regression target is discontinuous (the same
    bar is representable with angles ~pi apart) and axis-aligned sampling
    straddles neighboring bars.
    """
    cls = 1 % params.num_classes
    if rng.uniform() < 0.5:
        theta = (math.pi / 2 - rng.uniform(0.02, 0.3)) * rng.choice([-1, 1])
    else:
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
    w = rng.uniform(0.30, 0.44)
    h = rng.uniform(0.05, 0.08)
    gap = h * rng.uniform(1.7, 2.2)
    n = params.density
    # stack centers along the bar normal, centered in the image
    nx, ny = -math.sin(theta), -math.cos(theta)  # normal of the bar axis
    boxes = []
    for i in range(n):
        off = (i - (n - 1) / 2) * gap
        jitter = rng.uniform(-0.01, 0.01, 2)
        b = RotatedBox(0.5 + off * nx + jitter[0], 0.5 + off * ny + jitter[1],
                       w * rng.uniform(0.9, 1.05), h, theta)
        if _corners_inside(b, params.margin):
            boxes.append((b, cls))
    return boxes


def _clutter_boxes(rng: np.random.Generator, params: SceneParams, gts):
    """Unlabeled distractor blobs hugging the ends of the labeled bars.

    They carry the spare fourth color, so they are trivially not targets,
    but they sit exactly where sampling that leaves a bar's extent lands.
    """
    count = params.clutter if params.clutter is not None \
        else (params.density if params.dense else 0)
    out = []
    for _ in range(count):
        for _ in range(_MAX_TRIES):
            if gts:
                bar, _ = gts[int(rng.integers(len(gts)))]
                side = float(rng.choice([-1.0, 1.0]))
                sz = rng.uniform(0.04, 0.08)
                reach = side * (bar.w / 2 + sz / 2 + rng.uniform(0.005, 0.03))
                c, s = math.cos(bar.theta), math.sin(bar.theta)
                cx = bar.cx + reach * c + rng.uniform(-0.02, 0.02)
                cy = bar.cy - reach * s + rng.uniform(-0.02, 0.02)
                b = RotatedBox(cx, cy, sz, sz * rng.uniform(0.7, 1.3),
                               rng.uniform(-math.pi / 2, math.pi / 2))
            else:
                b = _sample_box(rng, 0, params)
            if not _corners_inside(b, params.margin):
                continue
            if all(geo.rotated_iou(b, g) <= 0.01 for g, _ in gts) and \
                    all(geo.rotated_iou(b, o) <= 0.05 for o in out):
                out.append(b)
                break
    return out


def _place_boxes(rng: np.random.Generator, params: SceneParams):
    boxes = []
    for _ in range(params.density):
        cls = int(rng.integers(params.num_classes))
        placed = False
        for _ in range(_MAX_TRIES):
            b = _sample_box(rng, cls, params)
            if not _corners_inside(b, params.margin):
                continue
            if all(geo.rotated_iou(b, ob) <= params.overlap_cap
                   for ob, _ in boxes):
                boxes.append((b, cls))
                placed = True
                break
        if not placed:
            warnings.warn(
                f"could only place {len(boxes)} of {params.density} targets "
                f"under overlap cap {params.overlap_cap}")
            break
    return boxes


def _coverage(b: RotatedBox, size: int) -> np.ndarray:
    """Anti-aliased fill mask [H, W] via supersampled inside tests."""
    ss = _SUPERSAMPLE
    n = size * ss
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)
    dx = xs - b.cx
    dy = ys - b.cy
    c, s = math.cos(b.theta), math.sin(b.theta)
    xl = dx * c - dy * s
    yl = dx * s + dy * c
    inside = (np.abs(xl) <= b.w / 2) & (np.abs(yl) <= b.h / 2)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Render one deterministic scene for the given seed."""
    rng = np.random.default_rng(seed)
    image = np.empty((3, params.size, params.size))
    image[:] = params.background
    image += rng.uniform(-params.noise, params.noise,
                         (3, params.size, params.size))
    if params.dense:
        boxes = _dense_boxes(rng, params)
    else:
        boxes = _place_boxes(rng, params)
    # distractors first, so the labeled targets stay fully visible
    for b in _clutter_boxes(rng, params, boxes):
        a = _coverage(b, params.size)
        image = image * (1.0 - a) + _COLORS[3].reshape(3, 1, 1) * a
    for b, cls in boxes:
        a = _coverage(b, params.size)
        color = _COLORS[cls].reshape(3, 1, 1)
        image = image * (1.0 - a) + color * a
    return SyntheticScene(np.clip(image, 0.0, 1.0), boxes, params)
