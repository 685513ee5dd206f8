"""Acceptance suite: ten criteria, one PASS/FAIL line each.

Criteria 1-5 and 10 are exact invariants and oracle equivalences.
Criteria 6-9 train small detectors on the dense synthetic preset and
check relative-improvement trends; they share trained models through a
module-level cache and dominate the suite's runtime.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as
they complete.
"""

import itertools
import math
import time

import numpy as np
import pytest

from rotdet import attention as at
from rotdet import geometry as geo
from rotdet import losses as ls
from rotdet import matching as mt
from rotdet import model as md
from rotdet import numcore as nc
from rotdet.geometry import RotatedBox
from rotdet.harness import train as tr
from rotdet.harness.config import RunConfig
from rotdet.model import Model, ModelConfig

# -- shared training preset for criteria 6-9 ------------------------------
# Small detector on the dense parallel-bar preset. The budget sits where
# rotation-sensitive sampling separates from the axis-aligned baseline.
DESK = dict(d_model=32, d_pe=64, n_queries=16)
DESK_RUN = dict(steps=1200, batch=2, n_train=60, n_eval=50, lr=5e-4,
                dense=True, density=4, log_every=600)
CROSS_RUN = dict(DESK_RUN, steps=400, n_eval=30)  # criterion 9, 12 runs
SEEDS = (0, 1, 2)

_CACHE = {}


def _train_eval(seed=0, run_overrides=(), **mflags):
    key = (seed, tuple(sorted(run_overrides)), tuple(sorted(mflags.items())))
    if key not in _CACHE:
        mc = ModelConfig(**{**DESK, **mflags})
        cfg = RunConfig(model=mc, seed=seed, **dict(DESK_RUN, **dict(run_overrides)))
        model, _ = tr.train(cfg)
        _, evals = tr.make_datasets(cfg)
        rep = tr.evaluate_model(model, evals, with_containment=True)
        _CACHE[key] = (model, rep)
    return _CACHE[key]


def _line(num, ok, detail):
    print(f"\ncriterion {num:2d} [{'PASS' if ok else 'FAIL'}] {detail}")
    assert ok, f"criterion {num}: {detail}"


# -- 1: gradient suite -----------------------------------------------------


def _grad_instances(rng):
    """One randomized instance per differentiable building block."""
    out = {}
    x = nc.tensor(rng.standard_normal((4, 6)), requires_grad=True)
    w = nc.tensor(rng.standard_normal((6, 5)), requires_grad=True)
    b = nc.tensor(rng.standard_normal(5), requires_grad=True)
    out["linear"] = nc.gradcheck(
        lambda x, w, b: nc.linear(x, w, b).sum(), [x, w, b], rng)

    g = nc.tensor(rng.standard_normal(6) * 0.1 + 1.0, requires_grad=True)
    be = nc.tensor(rng.standard_normal(6), requires_grad=True)
    xn = nc.tensor(rng.standard_normal((3, 6)), requires_grad=True)
    out["layer_norm"] = nc.gradcheck(
        lambda x, g, b: nc.layer_norm(x, g, b).sum(), [xn, g, be], rng)

    mix = rng.standard_normal((3, 6))
    xs = nc.tensor(rng.standard_normal((3, 6)), requires_grad=True)
    out["softmax"] = nc.gradcheck(
        lambda x: (nc.softmax(x, axis=-1) * mix).sum(), [xs], rng)

    feat = nc.tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    pts = nc.tensor(rng.uniform(0.15, 0.85, (6, 2)), requires_grad=True)
    out["bilinear_sample"] = nc.gradcheck(
        lambda f, p: nc.bilinear_sample(f, p).sum(), [feat, pts], rng)

    anchors = nc.tensor(_rand_anchors(rng, 2), requires_grad=True)
    dp = nc.tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
    out["modulate_offsets"] = nc.gradcheck(
        lambda d, a: at.modulate_offsets_batch(d, a, 1.0).sum(),
        [dp, anchors], rng)

    boxes = nc.tensor(_rand_anchors(rng, 2), requires_grad=True)
    gt = _rand_anchors(rng, 2)
    out["point_set_loss"] = nc.gradcheck(
        lambda b: ls.point_set_losses(b, gt).sum(), [boxes], rng)

    def iou_fn(b):
        pred = RotatedBox(b[(0, 0)], b[(0, 1)], b[(0, 2)], b[(0, 3)],
                          b[(0, 4)])
        return ls.rotated_iou_loss(pred, RotatedBox(*gt[0]))
    out["rotated_iou_loss"] = nc.gradcheck(iou_fn, [boxes], rng)

    deltas = nc.tensor(rng.standard_normal((2, 5)) * 0.3, requires_grad=True)
    out["refine_anchor"] = nc.gradcheck(
        lambda a, d: md.refine_anchor(a, d).sum(), [anchors, deltas], rng)

    cfg = ModelConfig(d_model=8, d_pe=8, heads=2, points=2, n_queries=2,
                      n_enc=1, n_dec=1)
    model = Model(cfg, rng)
    for t in model.params.values():
        if not np.any(t.data):
            t.data = rng.standard_normal(t.data.shape) * 0.1
    pyr = model.stem(rng.uniform(0, 1, (3, 32, 32)))
    spec = cfg.sampling_spec()
    z = nc.tensor(rng.standard_normal((2, 8)), requires_grad=True)
    out["rsdeform_attention"] = nc.gradcheck(
        lambda z, a: at.rsdeform_attention(
            z, a, pyr.feats, model._group("dec0/cross"), spec)[0].sum(),
        [z, anchors], rng)

    content = nc.tensor(rng.standard_normal((2, 8)), requires_grad=True)

    def dec_fn(c, a):
        c2, bx, lg, _ = model.decoder_layer(0, c, a, pyr)
        return c2.sum() + bx.sum() + lg.sum()
    out["decoder_layer"] = nc.gradcheck(dec_fn, [content, anchors], rng)
    return out


def _rand_anchors(rng, n):
    a = np.empty((n, 5))
    a[:, :2] = rng.uniform(0.3, 0.7, (n, 2))
    a[:, 2:4] = rng.uniform(0.1, 0.4, (n, 2))
    a[:, 4] = rng.uniform(-1.4, 1.4, n)
    return a


def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst = {}
    for rep in range(20):
        rng = np.random.default_rng(1000 + rep)
        for name, err in _grad_instances(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and elapsed < 120
    peak = max(worst, key=worst.get)
    _line(1, ok, f"gradient suite, 20 instances x {len(worst)} ops, "
                 f"worst rel err {worst[peak]:.1e} ({peak}), "
                 f"{elapsed:.0f}s < 120s")


# -- 2: Monte-Carlo IoU oracle ----------------------------------------------


def _mc_iou(a, b, rng, n=1_000_000):
    ca, cb = geo.box_to_corners(a), geo.box_to_corners(b)
    allc = np.vstack([ca, cb])
    lo, hi = allc.min(axis=0), allc.max(axis=0)
    pts = rng.uniform(lo, hi, (n, 2))

    def inside(box):
        d = pts - [box.cx, box.cy]
        c, s = math.cos(box.theta), math.sin(box.theta)
        xl = d[:, 0] * c - d[:, 1] * s
        yl = d[:, 0] * s + d[:, 1] * c
        return (np.abs(xl) <= box.w / 2) & (np.abs(yl) <= box.h / 2)

    inter = inside(a) & inside(b)
    area = inter.mean() * np.prod(hi - lo)
    return area / (a.area() + b.area() - area)


def test_criterion_2_iou_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        a = RotatedBox(*_rand_anchors(rng, 1)[0])
        b = RotatedBox(*_rand_anchors(rng, 1)[0])
        exact = float(geo.rotated_iou(a, b))
        worst = max(worst, abs(exact - _mc_iou(a, b, rng)))
    _line(2, worst < 5e-3,
          f"rotated_iou vs 1e6-sample Monte Carlo on 100 pairs, "
          f"max abs err {worst:.1e} < 5e-3")


# -- 3: point set loss properties --------------------------------------------


def _ps_oracle(a, b):
    ca, cb = geo.box_to_corners(a), geo.box_to_corners(b)
    best = math.inf
    for rev in (False, True):
        order = list(range(4))[::-1] if rev else list(range(4))
        for shift in range(4):
            m = [order[(i + shift) % 4] for i in range(4)]
            best = min(best, float(np.abs(ca - cb[m]).sum()))
    return best


def test_criterion_3_point_set_properties():
    rng = np.random.default_rng(33)
    worst_swap, worst_sym, worst_oracle = 0.0, 0.0, 0.0
    for _ in range(1000):
        a = RotatedBox(*_rand_anchors(rng, 1)[0])
        b = RotatedBox(*_rand_anchors(rng, 1)[0])
        swapped = RotatedBox(a.cx, a.cy, a.h, a.w, a.theta - math.pi / 2)
        worst_swap = max(worst_swap, ls.point_set_loss(a, swapped))
        worst_sym = max(worst_sym, abs(ls.point_set_loss(a, b)
                                       - ls.point_set_loss(b, a)))
        worst_oracle = max(worst_oracle, abs(ls.point_set_loss(a, b)
                                             - _ps_oracle(a, b)))
    ok = worst_swap < 1e-9 and worst_sym < 1e-9 and worst_oracle < 1e-9
    _line(3, ok, f"point set loss on 1000 boxes: swapped-repr max "
                 f"{worst_swap:.1e}, asymmetry {worst_sym:.1e}, "
                 f"8-mapping oracle gap {worst_oracle:.1e}")


# -- 4: Hungarian oracle ------------------------------------------------------


def test_criterion_4_hungarian_oracle():
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.standard_normal((n, m)) * 10
        got = mt.hungarian(cost).total_cost
        k = min(n, m)
        if n <= m:
            best = min(sum(cost[i, p[i]] for i in range(k))
                       for p in itertools.permutations(range(m), n))
        else:
            best = min(sum(cost[p[j], j] for j in range(k))
                       for p in itertools.permutations(range(n), m))
        worst = max(worst, abs(got - best))
    _line(4, worst < 1e-9, f"hungarian vs exhaustive minimum, 500 trials "
                           f"up to 7x7, max gap {worst:.1e}")


# -- 5: sampling restriction invariants ---------------------------------------


def test_criterion_5_rsdeform_invariants():
    rng = np.random.default_rng(55)
    anchors = _rand_anchors(rng, 10_000)
    dp = nc.tensor(rng.standard_normal((10_000, 1, 2)) * 4)
    off = at.modulate_offsets_batch(dp, nc.tensor(anchors), 1.0).data[:, 0]
    c = np.cos(anchors[:, 4])
    s = np.sin(anchors[:, 4])
    xl = off[:, 0] * c - off[:, 1] * s
    yl = off[:, 0] * s + off[:, 1] * c
    slack = max((np.abs(xl) - anchors[:, 2] / 2).max(),
                (np.abs(yl) - anchors[:, 3] / 2).max())

    # exact rotation equivariance of the sampling offsets in the angle
    dp2 = nc.tensor(rng.standard_normal((1, 64, 2)))
    base = np.array([[0.5, 0.5, 0.3, 0.2, 0.0]])
    worst_rot = 0.0
    for dth in rng.uniform(-1.5, 1.5, 20):
        rot = base.copy()
        rot[0, 4] = dth
        o0 = at.modulate_offsets_batch(dp2, nc.tensor(base), 1.0).data[0]
        o1 = at.modulate_offsets_batch(dp2, nc.tensor(rot), 1.0).data[0]
        cd, sd = math.cos(dth), math.sin(dth)
        ref = o0 @ np.array([[cd, -sd], [sd, cd]])
        worst_rot = max(worst_rot, np.abs(o1 - ref).max())
    ok = slack <= 1e-12 and worst_rot <= 1e-12
    _line(5, ok, f"alpha=1 containment slack {slack:.1e} over 1e4 draws, "
                 f"rotation equivariance err {worst_rot:.1e}")


# -- 6: ablation trend ---------------------------------------------------------


def _mean_ap50(**mflags):
    return float(np.mean([_train_eval(seed=s, **mflags)[1].ap50
                          for s in SEEDS]))


def test_criterion_6_ablation_trend():
    t0 = time.time()
    ap_base = _mean_ap50(rs=False, fa=False, dab=False, ps=False)
    ap_rs = _mean_ap50(rs=True, fa=False, dab=False, ps=False)
    ap_full = _mean_ap50(rs=True, fa=True, dab=True, ps=True)
    elapsed = time.time() - t0
    gain_full = (ap_full - ap_base) * 100
    gain_rs = (ap_rs - ap_base) * 100
    ok = gain_full >= 5.0 and gain_rs >= 2.0 and elapsed < 3600
    _line(6, ok, f"mean AP50 over seeds {SEEDS}: base {ap_base:.3f}, "
                 f"rs {ap_rs:.3f} (+{gain_rs:.1f}), full {ap_full:.3f} "
                 f"(+{gain_full:.1f}); need +2/+5; {elapsed:.0f}s < 3600s")


# -- 7: range restriction trend -------------------------------------------------


def test_criterion_7_alpha_trend():
    ap = {}
    for alpha in (1.0, 2.0, 4.0, None):
        flags = dict(rs=True, fa=False, dab=False, ps=False)
        if alpha != 1.0:           # 1.0 is the default; share the rs run
            flags["alpha"] = alpha
        _, rep = _train_eval(**flags)
        ap[alpha] = rep.ap50
    seq = [ap[1.0], ap[2.0], ap[4.0], ap[None]]
    ok = all(seq[i + 1] <= seq[i] + 0.01 for i in range(3))
    _line(7, ok, "AP50 over alpha 1/2/4/off: "
          + " ".join(f"{v:.3f}" for v in seq)
          + " (non-increasing, 1pt tie slack)")


# -- 8: sampling alignment --------------------------------------------------------


def test_criterion_8_containment():
    _, rep_base = _train_eval(rs=False, fa=False, dab=False, ps=False)
    _, rep_rs = _train_eval(rs=True, fa=False, dab=False, ps=False)
    ok = rep_rs.containment >= 0.95 and rep_rs.containment > rep_base.containment
    _line(8, ok, f"matched-query containment: restricted {rep_rs.containment:.3f} "
                 f"(need >= 0.95), baseline {rep_base.containment:.3f}")


# -- 9: label assignment cross ------------------------------------------------------


def test_criterion_9_assignment_cross():
    # scarce-query regime: with barely more queries than targets, the
    # first-stage assigner's effect on proposal diversity is visible
    means = {}
    for stage in ("one_stage", "two_stage"):
        for assign in ("o2o", "o2m"):
            vals = []
            for seed in SEEDS:
                _, rep = _train_eval(seed=seed,
                                     run_overrides=tuple(CROSS_RUN.items()),
                                     n_queries=8, stage_mode=stage,
                                     label_assign=assign)
                vals.append(rep.ap50)
            means[(stage, assign)] = float(np.mean(vals))
    one_ok = means[("one_stage", "o2m")] >= means[("one_stage", "o2o")]
    two_ok = means[("two_stage", "o2o")] > means[("two_stage", "o2m")]
    _line(9, one_ok and two_ok,
          f"mean AP50 over 3 seeds: one-stage o2m {means[('one_stage','o2m')]:.3f} "
          f"vs o2o {means[('one_stage','o2o')]:.3f}; two-stage o2o "
          f"{means[('two_stage','o2o')]:.3f} vs o2m "
          f"{means[('two_stage','o2m')]:.3f}")


# -- 10: determinism -----------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg_kw = dict(steps=30, batch=1, n_train=4, n_eval=2, image_size=32,
                  log_every=5, seed=7)
    logs = []
    for sub in ("a", "b"):
        cfg = RunConfig(model=ModelConfig(d_model=16, d_pe=16, n_queries=6,
                                          n_enc=1, n_dec=1), **cfg_kw)
        tr.train(cfg, out_dir=str(tmp_path / sub))
        logs.append((tmp_path / sub / "metrics.jsonl").read_bytes())
    weights = [(tmp_path / s / "weights.bin").read_bytes() for s in ("a", "b")]
    ok = logs[0] == logs[1] and weights[0] == weights[1]
    _line(10, ok, f"identical seeds: metrics logs byte-equal "
                  f"({len(logs[0])} bytes), snapshots byte-equal")
