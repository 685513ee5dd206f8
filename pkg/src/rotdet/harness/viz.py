"""Sampling-point visualization: render a scene, overlay each matched
query's final-layer sampling locations and its anchor outline, and report
point containment. Output is binary PPM (optionally SVG), byte-identical
for identical inputs.
"""

from __future__ import annotations

import warnings

import numpy as np

from .. import model as md
from ..geometry import RotatedBox, box_to_corners
from .scenes import SyntheticScene
from .train import matched_query_points, _inside

__all__ = ["write_ppm", "dump_sampling"]

_QUERY_COLORS = np.array([
    [255, 64, 64], [64, 255, 64], [80, 120, 255], [255, 220, 40],
    [255, 64, 255], [64, 255, 255], [255, 140, 0], [180, 255, 120],
])
_SCALE = 4  # upsample factor for the overlay canvas


def write_ppm(path, rgb: np.ndarray):
    """rgb: uint8 [H, W, 3] -> binary P6 file."""
    h, w, c = rgb.shape
    if c != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected uint8 [H, W, 3]")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _draw_line(canvas, x0, y0, x1, y1, color):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.clip(np.linspace(x0, x1, n).round().astype(int),
                 0, canvas.shape[1] - 1)
    ys = np.clip(np.linspace(y0, y1, n).round().astype(int),
                 0, canvas.shape[0] - 1)
    canvas[ys, xs] = color


def _draw_dot(canvas, x, y, color, r=2):
    h, w, _ = canvas.shape
    xi, yi = int(round(x)), int(round(y))
    canvas[max(yi - r, 0):yi + r + 1, max(xi - r, 0):xi + r + 1] = color


def _draw_box(canvas, box: RotatedBox, color, size):
    corners = box_to_corners(box) * size
    for i in range(4):
        x0, y0 = corners[i]
        x1, y1 = corners[(i + 1) % 4]
        _draw_line(canvas, x0, y0, x1, y1, color)


def dump_sampling(model: md.Model, scene: SyntheticScene, ppm_path,
                  svg_path=None):
    """Render the overlay and return (containment fraction, matched count).

    Each matched query gets a distinct color: sampling points as dots, its
    reference anchor as a solid outline, the matched ground-truth box as
    a dashed outline (SVG) and second outline (PPM), the gt center as a
    larger dot. The returned fraction is points-inside-reference-anchor,
    matching containment_rate.
    """
    matches = matched_query_points(model, scene)
    size = scene.params.size * _SCALE
    canvas = (np.repeat(np.repeat(
        scene.image.transpose(1, 2, 0), _SCALE, 0), _SCALE, 1)
        * 255).astype(np.uint8).copy()
    if not matches:
        warnings.warn("dump_sampling: no matched queries, empty overlay")
    inside = total = 0
    svg_items = []
    for qi, (ref_box, gt_box, locs) in enumerate(matches):
        color = _QUERY_COLORS[qi % len(_QUERY_COLORS)]
        pts = locs.reshape(-1, 2)
        inside += int(_inside(ref_box, pts).sum())
        total += len(pts)
        _draw_box(canvas, gt_box, color, size)
        _draw_box(canvas, ref_box, color, size)
        for x, y in pts:
            _draw_dot(canvas, x * size, y * size, color, r=2)
        _draw_dot(canvas, gt_box.cx * size, gt_box.cy * size, color, r=4)
        if svg_path is not None:
            rgb = f"rgb({color[0]},{color[1]},{color[2]})"
            for box, dash in ((gt_box, ' stroke-dasharray="0.01"'),
                              (ref_box, "")):
                cs = box_to_corners(box)
                path = " ".join(f"{x:.4f},{y:.4f}" for x, y in cs)
                svg_items.append(
                    f'<polygon points="{path}" fill="none" stroke="{rgb}" '
                    f'stroke-width="0.004"{dash}/>')
            for x, y in pts:
                svg_items.append(
                    f'<circle cx="{x:.4f}" cy="{y:.4f}" r="0.005" '
                    f'fill="{rgb}"/>')
    write_ppm(ppm_path, canvas)
    if svg_path is not None:
        body = "\n".join(svg_items)
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write('<svg xmlns="http://www.w3.org/2000/svg" '
                     'viewBox="0 0 1 1">\n' + body + "\n</svg>\n")
    fraction = inside / total if total else 0.0
    return fraction, len(matches)
