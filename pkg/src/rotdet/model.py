"""The assembled detector: convolutional stem, deformable encoder with
optional feature-alignment layers, rotation-sensitive decoder with
layer-by-layer anchor refinement, query initialization, and AdamW.

Feature toggles (all independent, mirroring the ablation grid):
    dab -- dynamic-anchor positional queries (vs learned static embeddings)
    rs  -- rotation-sensitive decoder cross-attention (vs raw offsets)
    fa  -- feature alignment layers at the end of the encoder
    ps  -- point set regression loss (vs 5-D L1)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as at
from . import geometry as geo
from . import losses as ls
from . import matching as mt
from . import numcore as nc
from .geometry import AngleRange, RotatedBox
from .losses import FocalParams, LossWeights
from .numcore import Tensor

__all__ = [
    "ModelConfig",
    "FeaturePyramid",
    "Model",
    "AdamW",
    "refine_anchor",
    "predict_box_head",
    "init_box_head",
]

RATIOS = (8, 16, 32)


@dataclass
class ModelConfig:
    stage_mode: str = "one_stage"      # one_stage | two_stage
    n_enc: int = 2
    n_dec: int = 2
    m_align: int = 1                   # trailing alignment layers (if fa)
    d_model: int = 64
    heads: int = 4
    points: int = 4
    n_queries: int = 16
    num_classes: int = 3
    alpha: float | None = 1.0          # None = unrestricted sampling range
    rs: bool = True
    fa: bool = True
    dab: bool = True
    ps: bool = True
    d_pe: int = 128
    anchor_scale: float = 4.0          # prior extent = scale*ratio/img pixels
    angle_range: float = math.pi
    label_assign: str = ""             # "o2o"|"o2m"; "" = per stage default
    o2m_k: int = 9
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)

    @property
    def levels(self) -> int:
        return len(RATIOS)

    @property
    def first_stage_assign(self) -> str:
        if self.label_assign in ("o2o", "o2m"):
            return self.label_assign
        return "o2o" if self.stage_mode == "two_stage" else "o2m"

    def sampling_spec(self) -> at.SamplingSpec:
        return at.SamplingSpec(self.heads, self.points, self.levels,
                               self.alpha)


@dataclass
class FeaturePyramid:
    levels: list          # [(Tensor[C,H,W], ratio), ...], ratios increasing
    pos: Tensor           # [P, d] sinusoid position + level embedding
    priors: np.ndarray    # [P, 5] horizontal prior anchors
    centers: np.ndarray   # [P, 2] pixel centers in normalized coords

    @property
    def feats(self):
        return [f for f, _ in self.levels]

    def flat_features(self) -> Tensor:
        cols = [f.reshape(f.shape[0], -1).transpose() for f in self.feats]
        return nc.concat(cols, axis=0)   # [P, C]

    def split_flat(self, flat: Tensor):
        """Back from [P, C] to per-level [C, H, W] maps."""
        out = []
        start = 0
        for f, r in self.levels:
            c, h, w = f.shape
            n = h * w
            lvl = flat[(slice(start, start + n),)].transpose().reshape(c, h, w)
            out.append(lvl)
            start += n
        return out


def _theta_decode(angle_range: AngleRange) -> tuple[np.ndarray, np.ndarray]:
    a = angle_range.A
    return np.array([1, 1, 1, 1, a]), np.array([0, 0, 0, 0, -a / 2])


def _norm5_arrays(angle_range: AngleRange):
    a = angle_range.A
    return np.array([1, 1, 1, 1, 1 / a]), np.array([0, 0, 0, 0, 0.5])


def refine_anchor(prev, deltas, angle_range: AngleRange = AngleRange()):
    """sigma(delta + sigma^-1(prev)) per field in normalized space.

    prev, deltas: [N,5] (prev may be numpy); angle stored in radians,
    normalized to (theta + A/2)/A for the update. Zero deltas leave the
    anchor unchanged. Output angles land in (-A/2, A/2), canonical for
    A = pi.
    """
    scale, shift = _norm5_arrays(angle_range)
    dec_scale, dec_shift = _theta_decode(angle_range)
    prev_t = prev if isinstance(prev, Tensor) else nc.tensor(prev)
    pn = prev_t * scale + shift
    new_n = nc.sigmoid(deltas + nc.inverse_sigmoid(pn))
    return new_n * dec_scale + dec_shift


def init_box_head(d: int, rng: np.random.Generator) -> dict:
    return {
        "w1": at._proj_init(d, d, rng),
        "b1": nc.zeros((d,), requires_grad=True),
        "w2": nc.zeros((d, 5), requires_grad=True),
        "b2": nc.zeros((5,), requires_grad=True),
    }


def predict_box_head(x, params: dict,
                     angle_range: AngleRange = AngleRange()) -> Tensor:
    """Direct 5-field box from an embedding: sigma(FFN(x)), angle decoded
    as theta_hat*A - A/2. Returns [N,5] (or [5] for a single embedding)."""
    x = x if isinstance(x, Tensor) else nc.tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    h = nc.relu(nc.linear(x, params["w1"], params["b1"]))
    raw = nc.sigmoid(nc.linear(h, params["w2"], params["b2"]))
    dec_scale, dec_shift = _theta_decode(angle_range)
    out = raw * dec_scale + dec_shift
    return out.reshape(5) if squeeze else out


def _ffn_init(d: int, rng: np.random.Generator) -> dict:
    return {
        "w1": at._proj_init(d, 2 * d, rng),
        "b1": nc.zeros((2 * d,), requires_grad=True),
        "w2": nc.zeros((2 * d, d), requires_grad=True),
        "b2": nc.zeros((d,), requires_grad=True),
        "ln_g": nc.tensor(np.ones(d), requires_grad=True),
        "ln_b": nc.zeros((d,), requires_grad=True),
    }


def _ffn(x: Tensor, p: dict) -> Tensor:
    h = nc.relu(nc.linear(x, p["w1"], p["b1"]))
    return nc.layer_norm(x + nc.linear(h, p["w2"], p["b2"]),
                         p["ln_g"], p["ln_b"])


def _pixel_sinusoid(centers: np.ndarray, d: int) -> np.ndarray:
    """Fixed 2-D position code: half the channels for x, half for y."""
    half = d // 2
    freq = 2.0 * math.pi / 10000.0 ** (2.0 * np.arange(half // 2) / half)
    out = np.zeros((len(centers), d))
    for k, col in enumerate((0, 1)):
        arg = centers[:, col:col + 1] * freq
        block = np.stack([np.sin(arg), np.cos(arg)], axis=2).reshape(-1, half)
        out[:, k * half:(k + 1) * half] = block
    return out


class Model:
    """Parameter container plus the forward/loss pipeline."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.pe_cfg = at.PosEncodingConfig(cfg.d_pe, 10000.0, d)
        self.angle_range = AngleRange(cfg.angle_range)
        p: dict[str, Tensor] = {}

        def conv(name, cin, cout, k=3):
            s = math.sqrt(2.0 / (cin * k * k))
            p[f"{name}/w"] = nc.randn((cout, cin, k, k), rng, s,
                                      requires_grad=True)
            p[f"{name}/b"] = nc.zeros((cout,), requires_grad=True)

        conv("stem/c0", 3, d)
        conv("stem/c1", d, d)
        conv("stem/c2", d, d)
        conv("stem/c3", d, d)
        conv("stem/c4", d, d)
        p["level_embed"] = nc.randn((cfg.levels, d), rng, 0.1,
                                    requires_grad=True)

        def add_group(prefix, group):
            for k, v in group.items():
                p[f"{prefix}/{k}"] = v

        n_align = cfg.m_align if cfg.fa else 0
        self.n_align = min(n_align, cfg.n_enc)
        for i in range(cfg.n_enc):
            is_align = i >= cfg.n_enc - self.n_align
            add_group(f"enc{i}/att",
                      at.init_deform(d, cfg.sampling_spec(), rng,
                                     rotation_sensitive=is_align))
            add_group(f"enc{i}/ffn", _ffn_init(d, rng))
            p[f"enc{i}/ln_g"] = nc.tensor(np.ones(d), requires_grad=True)
            p[f"enc{i}/ln_b"] = nc.zeros((d,), requires_grad=True)
            if is_align:
                p[f"enc{i}/obj_w"] = nc.zeros((d, 1), requires_grad=True)
                p[f"enc{i}/obj_b"] = nc.tensor(
                    np.full(1, -2.0), requires_grad=True)
                add_group(f"enc{i}/reg", init_box_head(d, rng))

        # proposal head on the encoder output (two-stage init + first-stage
        # supervision, present in every configuration)
        p["prop/obj_w"] = nc.zeros((d, 1), requires_grad=True)
        p["prop/obj_b"] = nc.tensor(np.full(1, -2.0), requires_grad=True)
        add_group("prop/reg", init_box_head(d, rng))
        p["tsp/w"] = at._proj_init(d, d, rng)
        p["tsp/b"] = nc.zeros((d,), requires_grad=True)

        add_group("pe_mlp", at.init_pe_mlp(self.pe_cfg, rng))
        p["query/content"] = nc.randn((cfg.n_queries, d), rng, 0.5,
                                      requires_grad=True)
        # raw anchors in inverse-sigmoid space; decoded through sigmoid
        p["query/anchor_raw"] = nc.tensor(
            self._initial_anchor_raw(cfg.n_queries, rng), requires_grad=True)
        p["query/pos"] = nc.randn((cfg.n_queries, d), rng, 0.5,
                                  requires_grad=True)

        for i in range(cfg.n_dec):
            add_group(f"dec{i}/self", at.init_self_attention(d, rng))
            add_group(f"dec{i}/cond", at.init_cond_mod(d, rng))
            add_group(f"dec{i}/cross",
                      at.init_deform(d, cfg.sampling_spec(), rng,
                                     rotation_sensitive=cfg.rs))
            p[f"dec{i}/ln_g"] = nc.tensor(np.ones(d), requires_grad=True)
            p[f"dec{i}/ln_b"] = nc.zeros((d,), requires_grad=True)
            add_group(f"dec{i}/ffn", _ffn_init(d, rng))
            p[f"dec{i}/cls_w"] = nc.randn((d, cfg.num_classes), rng,
                                          1.0 / math.sqrt(d),
                                          requires_grad=True)
            p[f"dec{i}/cls_b"] = nc.tensor(
                np.full(cfg.num_classes, -2.0), requires_grad=True)
            p[f"dec{i}/del_w"] = nc.zeros((d, 5), requires_grad=True)
            p[f"dec{i}/del_b"] = nc.zeros((5,), requires_grad=True)

        self.params = p

    @staticmethod
    def _initial_anchor_raw(n: int, rng: np.random.Generator) -> np.ndarray:
        def logit(x):
            return np.log(x / (1.0 - x))
        cx = rng.uniform(0.15, 0.85, n)
        cy = rng.uniform(0.15, 0.85, n)
        wh = np.full((n, 2), 0.2)
        th = np.full(n, 0.5)  # normalized angle 0.5 -> theta 0
        return np.column_stack([logit(cx), logit(cy), logit(wh), logit(th)])

    # -- sub-dict helpers ---------------------------------------------------

    def _group(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.params.items()
                if k.startswith(prefix + "/")}

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- forward pieces -------------------------------------------------------

    def stem(self, image) -> FeaturePyramid:
        """3xHxW image -> 3 levels at ratios 8/16/32, C = d_model."""
        x = image if isinstance(image, Tensor) else nc.tensor(image)
        _, hh, ww = x.shape
        if hh % RATIOS[-1] or ww % RATIOS[-1]:
            raise ValueError(
                f"image size {hh}x{ww} not divisible by {RATIOS[-1]}")
        p = self.params
        y = nc.relu(nc.conv2d(x, p["stem/c0/w"], p["stem/c0/b"], 2, 1))
        y = nc.relu(nc.conv2d(y, p["stem/c1/w"], p["stem/c1/b"], 2, 1))
        l0 = nc.conv2d(y, p["stem/c2/w"], p["stem/c2/b"], 2, 1)
        l1 = nc.conv2d(nc.relu(l0), p["stem/c3/w"], p["stem/c3/b"], 2, 1)
        l2 = nc.conv2d(nc.relu(l1), p["stem/c4/w"], p["stem/c4/b"], 2, 1)
        levels = [(l0, RATIOS[0]), (l1, RATIOS[1]), (l2, RATIOS[2])]
        return self._wrap_pyramid(levels, ww)

    def _wrap_pyramid(self, levels, img_w: int) -> FeaturePyramid:
        centers, priors, lvl_ids = [], [], []
        for li, (f, r) in enumerate(levels):
            _, hl, wl = f.shape
            ys, xs = np.meshgrid(np.arange(hl), np.arange(wl), indexing="ij")
            cx = (xs.ravel() + 0.5) / wl
            cy = (ys.ravel() + 0.5) / hl
            # extents >= 1 would saturate the inverse-sigmoid refinement
            ext = min(self.cfg.anchor_scale * r / img_w, 0.9)
            centers.append(np.stack([cx, cy], axis=1))
            priors.append(np.column_stack(
                [cx, cy, np.full_like(cx, ext), np.full_like(cx, ext),
                 np.zeros_like(cx)]))
            lvl_ids.append(np.full(hl * wl, li, dtype=np.int64))
        centers = np.concatenate(centers)
        priors = np.concatenate(priors)
        lvl_ids = np.concatenate(lvl_ids)
        sin_pos = _pixel_sinusoid(centers, self.cfg.d_model)
        pos = self.params["level_embed"][(lvl_ids,)] + sin_pos
        return FeaturePyramid(list(levels), pos, priors, centers)

    def _decode_proposals(self, flat: Tensor, pyramid: FeaturePyramid,
                          prefix: str, with_obj: bool = True):
        """Per-pixel objectness + rotated anchor decoded off the prior."""
        p = self.params
        obj = None
        if with_obj:
            obj = nc.linear(flat, p[f"{prefix}/obj_w"],
                            p[f"{prefix}/obj_b"]).reshape(-1)
        h = nc.relu(nc.linear(flat, p[f"{prefix}/reg/w1"],
                              p[f"{prefix}/reg/b1"]))
        deltas = nc.linear(h, p[f"{prefix}/reg/w2"], p[f"{prefix}/reg/b2"])
        anchors = refine_anchor(pyramid.priors, deltas, self.angle_range)
        return obj, anchors

    def encoder(self, pyramid: FeaturePyramid, training: bool = True):
        """(n_enc - m) plain deformable layers then m alignment layers.

        Returns (refined pyramid, first-stage outputs): each first-stage
        output is an (objectness [P], anchors Tensor[P,5]) pair; the last
        one always comes from the proposal head on the final features. At
        inference the alignment classification branch is skipped (its
        objectness slot is None); the proposal head objectness is always
        computed since two-stage query selection needs it.
        """
        cfg = self.cfg
        spec = cfg.sampling_spec()
        flat = pyramid.flat_features()
        stage_outputs = []
        cur = pyramid
        for i in range(cfg.n_enc):
            is_align = i >= cfg.n_enc - self.n_align
            z = flat + cur.pos
            if is_align:
                obj, anchors = self._decode_proposals(flat, cur, f"enc{i}",
                                                      with_obj=training)
                stage_outputs.append((obj, anchors))
                refs = Tensor(anchors.data)  # detached: stability
                out, _ = at.rsdeform_attention(z, refs, cur.feats,
                                               self._group(f"enc{i}/att"),
                                               spec)
            else:
                out, _ = at.deform_attention(z, cur.priors, cur.feats,
                                             self._group(f"enc{i}/att"),
                                             spec)
            flat = nc.layer_norm(flat + out, self.params[f"enc{i}/ln_g"],
                                 self.params[f"enc{i}/ln_b"])
            flat = _ffn(flat, self._group(f"enc{i}/ffn"))
            cur = FeaturePyramid(
                list(zip(cur.split_flat(flat),
                         [r for _, r in cur.levels])),
                cur.pos, cur.priors, cur.centers)
            flat = cur.flat_features()
        obj, anchors = self._decode_proposals(flat, cur, "prop")
        stage_outputs.append((obj, anchors))
        return cur, flat, stage_outputs

    def init_queries(self, flat: Tensor, stage_outputs):
        """Decoder query contents [n_q, d] and anchors Tensor[n_q, 5]."""
        cfg = self.cfg
        p = self.params
        if cfg.stage_mode == "one_stage":
            raw = p["query/anchor_raw"]
            dec_scale, dec_shift = _theta_decode(self.angle_range)
            anchors = nc.sigmoid(raw) * dec_scale + dec_shift
            return p["query/content"], anchors
        obj, anchors = stage_outputs[-1]
        n_q = cfg.n_queries
        total = obj.shape[0]
        if n_q > total:
            warnings.warn(
                f"n_queries {n_q} exceeds {total} pixels; clamping")
            n_q = total
        top = np.argsort(-obj.data, kind="stable")[:n_q]
        content = nc.linear(flat[(top,)], p["tsp/w"], p["tsp/b"])
        return content, Tensor(anchors.data[top])  # anchors detached

    def decoder_layer(self, i: int, content: Tensor, anchors,
                      pyramid: FeaturePyramid):
        """Self-attention, (RS)Deform cross-attention, FFN, prediction."""
        cfg = self.cfg
        p = self.params
        spec = cfg.sampling_spec()
        if cfg.dab:
            pos = at.encode_anchor(anchors, self._group("pe_mlp"),
                                   self.pe_cfg)
        else:
            pos = p["query/pos"]
        content = at.self_attention(content, pos, self._group(f"dec{i}/self"),
                                    cfg.heads)
        if cfg.dab:
            zq = at.conditional_query_mod(content, pos,
                                          self._group(f"dec{i}/cond"))
        else:
            zq = content + pos
        fn = at.rsdeform_attention if cfg.rs else at.deform_attention
        cross, locs = fn(zq, anchors, pyramid.feats,
                         self._group(f"dec{i}/cross"), spec)
        content = nc.layer_norm(content + cross, p[f"dec{i}/ln_g"],
                                p[f"dec{i}/ln_b"])
        content = _ffn(content, self._group(f"dec{i}/ffn"))
        logits = nc.linear(content, p[f"dec{i}/cls_w"], p[f"dec{i}/cls_b"])
        deltas = nc.linear(content, p[f"dec{i}/del_w"], p[f"dec{i}/del_b"])
        boxes = refine_anchor(anchors, deltas, self.angle_range)
        return content, boxes, logits, locs

    def forward(self, image, gts=None):
        """Full pipeline. `gts` is an optional list of (RotatedBox, class).

        Returns a dict with per-layer predictions, first-stage outputs,
        sampling locations, and (in training) the loss Tensor + breakdown.
        """
        pyramid = self.stem(image)
        pyramid, flat, stage_outputs = self.encoder(pyramid,
                                                    training=gts is not None)
        content, anchors = self.init_queries(flat, stage_outputs)
        layers = []
        for i in range(self.cfg.n_dec):
            ref = np.array(anchors.data)  # the anchor the offsets see
            content, boxes, logits, locs = self.decoder_layer(
                i, content, anchors, pyramid)
            layers.append({"logits": logits, "boxes": boxes, "locs": locs,
                           "anchors": ref})
            anchors = Tensor(boxes.data)  # detach between layers
        out = {
            "layers": layers,
            "stage_outputs": stage_outputs,
            "pyramid": pyramid,
        }
        if gts is not None:
            out["loss"], out["breakdown"] = self._losses(
                layers, stage_outputs, pyramid, gts)
        return out

    # -- training losses -----------------------------------------------------

    def _first_stage_loss(self, stage_outputs, pyramid: FeaturePyramid, gts):
        cfg = self.cfg
        gt_boxes = [b for b, _ in gts]
        terms = []
        cls_floats = []
        for obj, anchors in stage_outputs:
            if len(gt_boxes) == 0:
                match = mt.MatchResult([], 0.0, "O2O")
            elif cfg.first_stage_assign == "o2m":
                match = mt.o2m_assign(pyramid.centers, gt_boxes, cfg.o2m_k)
            else:
                cost = mt.build_cost(
                    obj.reshape(-1, 1), anchors, np.zeros(len(gt_boxes),
                                                          dtype=np.int64),
                    gt_boxes, cfg.weights, cfg.focal,
                    use_point_set=cfg.ps)
                match = mt.hungarian(cost)
            targets = np.full(obj.shape[0], ls.BACKGROUND, dtype=np.int64)
            for pi, _ in match.pairs:
                targets[pi] = 0
            n_pos = max(len(match.pairs), 1)
            cls = ls.focal_loss(obj.reshape(-1, 1), targets, cfg.focal,
                                normalizer=n_pos)
            if match.pairs:
                p_idx = np.array([pi for pi, _ in match.pairs])
                g_idx = [gi for _, gi in match.pairs]
                g5 = np.stack([ls._as_box5(gt_boxes[gi]) for gi in g_idx])
                matched = anchors[(p_idx,)]
                if cfg.ps:
                    reg = ls.point_set_losses(matched, g5).sum() * (1.0 / n_pos)
                else:
                    reg = ls.l1_box_losses(matched, g5,
                                           self.angle_range).sum() * (1.0 / n_pos)
            else:
                reg = nc.tensor(0.0)
            cls_floats.append(float(cls.data))
            terms.append(cfg.weights.cls * cls + cfg.weights.reg * reg)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms)), cls_floats

    def _losses(self, layers, stage_outputs, pyramid, gts):
        cfg = self.cfg
        gt_classes = np.array([c for _, c in gts], dtype=np.int64)
        gt_boxes = [b for b, _ in gts]
        loss = None
        breakdown = {}
        for li, layer in enumerate(layers):
            cost = mt.build_cost(layer["logits"], layer["boxes"], gt_classes,
                                 gt_boxes, cfg.weights, cfg.focal,
                                 use_point_set=cfg.ps)
            match = mt.hungarian(cost)
            term, bd = ls.total_loss(layer["logits"], layer["boxes"],
                                     gt_classes, gt_boxes, match,
                                     cfg.weights, cfg.focal,
                                     self.angle_range,
                                     use_point_set=cfg.ps)
            breakdown[f"dec{li}"] = bd
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(layers))
        fs, fs_cls = self._first_stage_loss(stage_outputs, pyramid, gts)
        breakdown["first_stage"] = float(fs.data)
        breakdown["first_stage_cls"] = fs_cls
        loss = loss + fs
        breakdown["total"] = float(loss.data)
        return loss, breakdown

    # -- snapshots -------------------------------------------------------------

    def save(self, path):
        nc.save_weights(path, self.params)

    def load(self, path):
        loaded = nc.load_weights(path)
        for k, t in self.params.items():
            if k not in loaded:
                raise KeyError(f"snapshot missing tensor {k}")
            if loaded[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = loaded[k].data
        return self


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-3):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if p.data.ndim > 1:
                update = update + self.wd * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
