"""Attention machinery: sinusoidal anchor encodings, multi-head
self-attention, multi-scale deformable attention, and its
rotation-sensitive variant with offset squashing, anchor-extent scaling,
and angle rotation.

Parameter sets are plain dicts of named Tensors produced by the init_*
functions; forward functions are pure in the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import numcore as nc
from .geometry import RotatedBox
from .numcore import Tensor

__all__ = [
    "PosEncodingConfig",
    "SamplingSpec",
    "sinusoid",
    "encode_anchor",
    "self_attention",
    "deform_attention",
    "rsdeform_attention",
    "modulate_offsets",
    "modulate_offsets_batch",
    "conditional_query_mod",
    "init_pe_mlp",
    "init_self_attention",
    "init_deform",
    "init_cond_mod",
]


@dataclass
class PosEncodingConfig:
    d_pe: int = 128          # per-scalar sinusoid width, must be even
    temperature: float = 10000.0
    d_model: int = 64

    def __post_init__(self):
        if self.d_pe % 2:
            raise ValueError("d_pe must be even")


@dataclass
class SamplingSpec:
    heads: int = 4
    points: int = 4          # per head per level
    levels: int = 3
    alpha: float | None = 1.0  # None = no range restriction (rotation only)

    def __post_init__(self):
        if self.heads < 1 or self.points < 1 or self.levels < 1:
            raise ValueError("heads, points, levels must all be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive or None")


def sinusoid(x: Tensor, d_pe: int, temperature: float = 10000.0) -> Tensor:
    """Interleaved sin/cos embedding of scalars x[N] -> [N, d_pe].

    Even slots carry sin, odd slots cos, pair j at frequency
    2*pi / temperature^(2j/d_pe).
    """
    x = x if isinstance(x, Tensor) else nc.tensor(x)
    half = d_pe // 2
    freq = 2.0 * math.pi / temperature ** (2.0 * np.arange(half) / d_pe)
    arg = x.reshape(-1, 1) * freq
    return nc.stack([arg.sin(), arg.cos()], axis=2).reshape(-1, d_pe)


def init_pe_mlp(cfg: PosEncodingConfig, rng: np.random.Generator) -> dict:
    d_in = 4 * cfg.d_pe + 2
    d = cfg.d_model
    s1 = 1.0 / math.sqrt(d_in)
    s2 = 1.0 / math.sqrt(d)
    return {
        "w1": nc.randn((d_in, d), rng, s1, requires_grad=True),
        "b1": nc.zeros((d,), requires_grad=True),
        "w2": nc.randn((d, d), rng, s2, requires_grad=True),
        "b2": nc.zeros((d,), requires_grad=True),
    }


def encode_anchor(anchors, params: dict, cfg: PosEncodingConfig) -> Tensor:
    """Positional query for rotated anchors [N,5] -> [N, d_model].

    Concatenates sinusoids of the 4 box scalars with (sin, cos) of the
    angle, then a 2-layer MLP. Differentiable in the anchor fields.
    """
    a = anchors if isinstance(anchors, Tensor) else nc.tensor(anchors)
    if a.ndim == 1:
        a = a.reshape(1, 5)
    blocks = [sinusoid(a[(slice(None), i)], cfg.d_pe, cfg.temperature)
              for i in range(4)]
    th = a[(slice(None), 4)]
    blocks.append(th.sin().reshape(-1, 1))
    blocks.append(th.cos().reshape(-1, 1))
    pe = nc.concat(blocks, axis=1)
    hidden = nc.relu(nc.linear(pe, params["w1"], params["b1"]))
    return nc.linear(hidden, params["w2"], params["b2"])


def _proj_init(d_in, d_out, rng):
    return nc.randn((d_in, d_out), rng, 1.0 / math.sqrt(d_in),
                    requires_grad=True)


def init_self_attention(d: int, rng: np.random.Generator) -> dict:
    return {
        "wq": _proj_init(d, d, rng), "bq": nc.zeros((d,), requires_grad=True),
        "wk": _proj_init(d, d, rng), "bk": nc.zeros((d,), requires_grad=True),
        "wv": _proj_init(d, d, rng), "bv": nc.zeros((d,), requires_grad=True),
        # zero output projection: the residual path starts as the identity
        "wo": nc.zeros((d, d), requires_grad=True),
        "bo": nc.zeros((d,), requires_grad=True),
        "ln_g": nc.tensor(np.ones(d), requires_grad=True),
        "ln_b": nc.zeros((d,), requires_grad=True),
    }


def self_attention(contents: Tensor, pos: Tensor, params: dict,
                   heads: int) -> Tensor:
    """Multi-head attention with Q = K = content + positional, V = content.

    Residual and layer norm applied; returns updated contents [N, d].
    """
    n, d = contents.shape
    dh = d // heads
    qk_in = contents + pos
    q = nc.linear(qk_in, params["wq"], params["bq"])
    k = nc.linear(qk_in, params["wk"], params["bk"])
    v = nc.linear(contents, params["wv"], params["bv"])
    # [N, d] -> [heads, N, dh]
    q = q.reshape(n, heads, dh).transpose(1, 0, 2)
    k = k.reshape(n, heads, dh).transpose(1, 0, 2)
    v = v.reshape(n, heads, dh).transpose(1, 0, 2)
    scores = nc.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    att = nc.softmax(scores, axis=-1)
    mixed = nc.matmul(att, v).transpose(1, 0, 2).reshape(n, d)
    out = nc.linear(mixed, params["wo"], params["bo"])
    return nc.layer_norm(contents + out, params["ln_g"], params["ln_b"])


def init_deform(d: int, spec: SamplingSpec, rng: np.random.Generator,
                rotation_sensitive: bool = True) -> dict:
    """Heads for offsets and attention logits plus value/output projections.

    Offset weights start at zero with dispersed biases so the initial
    sampling points spread around the anchor instead of collapsing to its
    center. The rotation-sensitive variant spreads inside the anchor (the
    squash guarantees containment regardless); the raw variant spreads by
    whole grid cells per pyramid level, the standard deformable-attention
    placement. The output projection starts at zero (identity residual).
    """
    h, l, k = spec.heads, spec.levels, spec.points
    n_pts = h * l * k
    angles = 2.0 * math.pi * np.arange(n_pts) / n_pts
    if rotation_sensitive:
        radii = 0.5 + 0.5 * (np.arange(n_pts) % k) / max(k - 1, 1)
        dirs = np.stack([np.cos(angles) * radii,
                         np.sin(angles) * radii], axis=1)
        off_bias = 1.5 * dirs  # pre-squash logits, sigma() spreads in anchor
    else:
        # (point index + 1) cells at each level's stride, finest cell 1/8
        cells = (2.0 ** np.arange(l)) / 8.0
        radii = (np.tile(np.arange(k) + 1.0, h * l)
                 * np.repeat(np.tile(cells, h), k))
        off_bias = np.stack([np.cos(angles) * radii,
                             np.sin(angles) * radii], axis=1)
    return {
        "off_w": nc.zeros((d, n_pts * 2), requires_grad=True),
        "off_b": nc.tensor(off_bias.ravel(), requires_grad=True),
        "att_w": nc.zeros((d, n_pts), requires_grad=True),
        "att_b": nc.zeros((n_pts,), requires_grad=True),
        "val_w": _proj_init(d, d, rng),
        "val_b": nc.zeros((d,), requires_grad=True),
        "out_w": nc.zeros((d, d), requires_grad=True),
        "out_b": nc.zeros((d,), requires_grad=True),
    }


def modulate_offsets(dp, anchor: RotatedBox, alpha: float | None = 1.0):
    """Squash raw offsets into the anchor: alpha*(w,h)*(sigma(dp)-1/2)*R^T.

    With alpha=None the squash and scale are dropped and only the rotation
    of the raw offsets remains (the unrestricted ablation).
    """
    dp = dp if isinstance(dp, Tensor) else nc.tensor(dp)
    if alpha is not None:
        sq = dp.sigmoid() - 0.5
        w = anchor.w if isinstance(anchor.w, Tensor) else nc.tensor(anchor.w)
        h = anchor.h if isinstance(anchor.h, Tensor) else nc.tensor(anchor.h)
        scale = nc.stack([alpha * w, alpha * h])
        dp = sq * scale
    return geo.rotate_offsets(dp, anchor.theta)


def modulate_offsets_batch(dp: Tensor, anchors, alpha: float | None = 1.0,
                           rotate: bool = True) -> Tensor:
    """Vectorized modulation: dp [N,M,2] against anchors [N,5] -> [N,M,2]."""
    a = anchors if isinstance(anchors, Tensor) else nc.tensor(anchors)
    n = dp.shape[0]
    ox = dp[(slice(None), slice(None), 0)]
    oy = dp[(slice(None), slice(None), 1)]
    if alpha is not None:
        w = a[(slice(None), 2)].reshape(n, 1)
        h = a[(slice(None), 3)].reshape(n, 1)
        ox = alpha * w * (ox.sigmoid() - 0.5)
        oy = alpha * h * (oy.sigmoid() - 0.5)
    if rotate:
        th = a[(slice(None), 4)]
        c = th.cos().reshape(n, 1)
        s = th.sin().reshape(n, 1)
        rx = ox * c + oy * s
        ry = oy * c - ox * s
        return nc.stack([rx, ry], axis=2)
    return nc.stack([ox, oy], axis=2)


def _deform_core(z: Tensor, anchors, feats, params: dict, spec: SamplingSpec,
                 modulate: bool):
    n, d = z.shape
    h, l, k = spec.heads, spec.levels, spec.points
    if len(feats) != l:
        raise ValueError(f"expected {l} pyramid levels, got {len(feats)}")
    dh = d // h

    raw = nc.linear(z, params["off_w"], params["off_b"])
    raw = raw.reshape(n, h * l * k, 2)
    if modulate:
        offs = modulate_offsets_batch(raw, anchors, spec.alpha)
    else:
        offs = raw
    a = anchors if isinstance(anchors, Tensor) else nc.tensor(anchors)
    centers = a[(slice(None), slice(0, 2))].reshape(n, 1, 2)
    locs = (centers + offs).reshape(n, h, l, k, 2)

    logits = nc.linear(z, params["att_w"], params["att_b"]).reshape(n, h, l * k)
    attw = nc.softmax(logits, axis=-1).reshape(n, h, l, k)

    # shared value projection, applied per level
    vals = []
    for lev in range(l):
        cf, hl, wl = feats[lev].shape
        flat = feats[lev].reshape(cf, hl * wl).transpose()
        vals.append(nc.linear(flat, params["val_w"], params["val_b"]))

    head_outs = []
    for hi in range(h):
        acc = None
        for lev in range(l):
            _, hl, wl = feats[lev].shape
            vmap = vals[lev][(slice(None), slice(hi * dh, (hi + 1) * dh))]
            vmap = vmap.transpose().reshape(dh, hl, wl)
            pts = locs[(slice(None), hi, lev)].reshape(n * k, 2)
            sampled = nc.bilinear_sample(vmap, pts).reshape(n, k, dh)
            wgt = attw[(slice(None), hi, lev)].reshape(n, k, 1)
            term = (sampled * wgt).sum(axis=1)
            acc = term if acc is None else acc + term
        head_outs.append(acc)
    mixed = nc.concat(head_outs, axis=1)
    out = nc.linear(mixed, params["out_w"], params["out_b"])
    return out, locs.data.copy()


def deform_attention(z: Tensor, anchors, feats, params: dict,
                     spec: SamplingSpec):
    """Plain multi-scale deformable attention around the anchor centers.

    Raw offsets are in normalized image units. Returns (output [N,d],
    realized sampling locations [N,heads,levels,points,2] as numpy).
    """
    return _deform_core(z, anchors, feats, params, spec, modulate=False)


def rsdeform_attention(z: Tensor, anchors, feats, params: dict,
                       spec: SamplingSpec):
    """Deformable attention with offsets squashed into, scaled by, and
    rotated with the reference anchor. Same interface as deform_attention."""
    return _deform_core(z, anchors, feats, params, spec, modulate=True)


def init_cond_mod(d: int, rng: np.random.Generator) -> dict:
    return {
        "w1": _proj_init(d, d, rng),
        "b1": nc.zeros((d,), requires_grad=True),
        "w2": nc.zeros((d, d), requires_grad=True),
        # ones bias: the modulation starts as the identity on p_q
        "b2": nc.tensor(np.ones(d), requires_grad=True),
    }


def conditional_query_mod(c: Tensor, p: Tensor, params: dict) -> Tensor:
    """Cross-attention query c + p * MLP(c) with an element-wise scale."""
    scale = nc.linear(nc.relu(nc.linear(c, params["w1"], params["b1"])),
                      params["w2"], params["b2"])
    return c + p * scale
