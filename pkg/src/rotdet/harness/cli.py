"""Command line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck, dump-sampling.
Every config key is exposed as a flag; --config loads a key=value file
first and flags override it. --seed and --out-dir work everywhere.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .. import attention as at
from .. import geometry as geo
from .. import losses as ls
from .. import model as md
from .. import numcore as nc
from ..geometry import RotatedBox
from . import config as cf
from .ablation import format_table, run_ablation
from .scenes import SceneParams, gen_scene
from .train import evaluate_model, make_datasets, train
from .viz import dump_sampling, write_ppm

_ALL_KEYS = cf._MODEL_KEYS + cf._RUN_KEYS + cf._WEIGHT_KEYS


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    for key in _ALL_KEYS:
        if key == "seed":
            continue
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"k_{key}",
                       metavar="V", help=argparse.SUPPRESS)


def _build_config(args) -> cf.RunConfig:
    cfg = cf.load_config(args.config) if args.config else cf.RunConfig()
    overrides = [f"{key} = {raw}" for key in _ALL_KEYS
                 if (raw := getattr(args, f"k_{key}", None)) is not None]
    if overrides:
        cfg = cf.parse_config(cf.format_config(cfg) + "\n".join(overrides))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_gen_data(args):
    cfg = _build_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    params = SceneParams(size=cfg.image_size, density=cfg.density,
                         num_classes=cfg.model.num_classes, dense=cfg.dense)
    count = args.count
    index = []
    for i in range(count):
        scene = gen_scene(cfg.seed * 100_003 + i, params)
        rgb = (scene.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        name = f"scene{i:04d}"
        write_ppm(os.path.join(args.out_dir, name + ".ppm"), rgb)
        index.append({
            "image": name + ".ppm",
            "gts": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
                     "theta": b.theta, "cls": c} for b, c in scene.gts],
        })
    with open(os.path.join(args.out_dir, "scenes.json"), "w",
              encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
    print(f"wrote {count} scenes to {args.out_dir}")
    return 0


def _cmd_train(args):
    cfg = _build_config(args)
    model, records = train(cfg, out_dir=args.out_dir)
    _, evals = make_datasets(cfg)
    report = evaluate_model(model, evals)
    print(json.dumps(report.as_dict()))
    if args.out_dir:
        with open(os.path.join(args.out_dir, "eval.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh)
    return 0


def _cmd_eval(args):
    cfg = _build_config(args)
    model = md.Model(cfg.model, np.random.default_rng(cfg.seed))
    model.load(args.weights)
    _, evals = make_datasets(cfg)
    report = evaluate_model(model, evals, voc11=args.voc11,
                            with_containment=True)
    print(json.dumps(report.as_dict()))
    return 0


def _parse_grid(spec: str):
    grid = []
    for group in spec.split(";"):
        overrides = {}
        group = group.strip()
        if group:
            for item in group.split(","):
                key, raw = (s.strip() for s in item.split("="))
                overrides[key] = cf._parse_value(key, raw)
        grid.append(overrides)
    return grid


def _cmd_ablate(args):
    cfg = _build_config(args)
    grid = _parse_grid(args.grid)
    rows = run_ablation(grid, cfg, out_dir=args.out_dir,
                        with_containment=args.containment)
    print(format_table(rows))
    if args.out_dir:
        payload = [{"overrides": {k: str(v) for k, v in o.items()},
                    **r.as_dict(), "seconds": s} for o, r, s in rows]
        with open(os.path.join(args.out_dir, "ablation.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    return 0


def _cmd_dump_sampling(args):
    cfg = _build_config(args)
    model = md.Model(cfg.model, np.random.default_rng(cfg.seed))
    model.load(args.weights)
    params = SceneParams(size=cfg.image_size, density=cfg.density,
                         num_classes=cfg.model.num_classes, dense=cfg.dense)
    scene = gen_scene(args.scene_seed, params)
    os.makedirs(args.out_dir, exist_ok=True)
    ppm = os.path.join(args.out_dir, "sampling.ppm")
    svg = os.path.join(args.out_dir, "sampling.svg") if args.svg else None
    fraction, matched = dump_sampling(model, scene, ppm, svg)
    print(json.dumps({"containment": fraction, "matched_queries": matched,
                      "ppm": ppm, "svg": svg}))
    return 0


def _gradcheck_suite(rng: np.random.Generator):
    """(name, worst relative error) for each differentiable building block."""
    checks = []

    x = nc.tensor(rng.standard_normal((4, 6)), requires_grad=True)
    w = nc.tensor(rng.standard_normal((6, 5)), requires_grad=True)
    b = nc.tensor(rng.standard_normal(5), requires_grad=True)
    checks.append(("linear", nc.gradcheck(
        lambda x, w, b: nc.linear(x, w, b).sum(), [x, w, b], rng)))

    g = nc.tensor(rng.standard_normal(6) * 0.1 + 1.0, requires_grad=True)
    be = nc.tensor(rng.standard_normal(6), requires_grad=True)
    checks.append(("layer_norm", nc.gradcheck(
        lambda x, g, b: nc.layer_norm(x, g, b).sum(),
        [nc.tensor(rng.standard_normal((3, 6)), requires_grad=True), g, be],
        rng)))

    mix = rng.standard_normal((3, 6))
    checks.append(("softmax", nc.gradcheck(
        lambda x: (nc.softmax(x, axis=-1) * mix).sum(),
        [nc.tensor(rng.standard_normal((3, 6)), requires_grad=True)], rng)))

    feat = nc.tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    pts = nc.tensor(rng.uniform(0.15, 0.85, (6, 2)), requires_grad=True)
    checks.append(("bilinear_sample", nc.gradcheck(
        lambda f, p: nc.bilinear_sample(f, p).sum(), [feat, pts], rng)))

    anchors = nc.tensor(np.array([[0.5, 0.5, 0.3, 0.2, 0.4],
                                  [0.4, 0.6, 0.2, 0.3, -0.9]]),
                        requires_grad=True)
    dp = nc.tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
    checks.append(("modulate_offsets", nc.gradcheck(
        lambda d, a: at.modulate_offsets_batch(d, a, 1.0).sum(),
        [dp, anchors], rng)))

    boxes = nc.tensor(np.array([[0.5, 0.5, 0.3, 0.2, 0.4]]),
                      requires_grad=True)
    gt = np.array([[0.52, 0.48, 0.25, 0.22, 0.6]])
    checks.append(("point_set_loss", nc.gradcheck(
        lambda b: ls.point_set_losses(b, gt).sum(), [boxes], rng)))

    def iou_fn(b):
        pred = RotatedBox(b[(0, 0)], b[(0, 1)], b[(0, 2)], b[(0, 3)],
                          b[(0, 4)])
        return ls.rotated_iou_loss(pred, RotatedBox(*gt[0]))
    checks.append(("rotated_iou_loss", nc.gradcheck(iou_fn, [boxes], rng)))

    deltas = nc.tensor(rng.standard_normal((2, 5)) * 0.3, requires_grad=True)
    checks.append(("refine_anchor", nc.gradcheck(
        lambda a, d: md.refine_anchor(a, d).sum(), [anchors, deltas], rng)))

    cfg = md.ModelConfig(d_model=8, d_pe=8, heads=2, points=2, n_queries=2,
                         n_enc=1, n_dec=1)
    model = md.Model(cfg, rng)
    for k, t in model.params.items():
        if not np.any(t.data):
            t.data = rng.standard_normal(t.data.shape) * 0.1
    pyr = model.stem(rng.uniform(0, 1, (3, 32, 32)))
    spec = cfg.sampling_spec()
    z = nc.tensor(rng.standard_normal((2, 8)), requires_grad=True)
    checks.append(("rsdeform_attention", nc.gradcheck(
        lambda z, a: at.rsdeform_attention(
            z, a, pyr.feats, model._group("dec0/cross"), spec)[0].sum(),
        [z, anchors], rng)))

    content = nc.tensor(rng.standard_normal((2, 8)), requires_grad=True)

    def dec_fn(c, a):
        c2, bx, lg, _ = model.decoder_layer(0, c, a, pyr)
        return c2.sum() + bx.sum() + lg.sum()
    checks.append(("decoder_layer", nc.gradcheck(dec_fn, [content, anchors],
                                                 rng)))
    return checks


def _cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    tol = args.tol
    failed = 0
    for name, err in _gradcheck_suite(rng):
        ok = err < tol
        print(f"{'PASS' if ok else 'FAIL'} {name}: rel err {err:.3e} "
              f"(tol {tol:.0e})")
        failed += 0 if ok else 1
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rotdet",
        description="Oriented detection with rotation-sensitive attention")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, out_required=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None, required=out_required)
        _add_config_args(p)

    p = sub.add_parser("gen-data", help="write scenes as PPM + JSON gts")
    common(p, out_required=True)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model, write log + snapshot")
    common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a snapshot")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--voc11", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="train a config grid")
    common(p)
    p.add_argument("--grid", required=True,
                   help="semicolon-separated override groups, "
                        "e.g. ';rs=true;rs=true,dab=true'")
    p.add_argument("--containment", action="store_true")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("dump-sampling", help="sampling-point overlay image")
    common(p, out_required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(fn=_cmd_dump_sampling)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
