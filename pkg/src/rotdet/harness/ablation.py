"""Grid runner: train each configuration under a shared seed and budget,
then evaluate with the same scene set."""

from __future__ import annotations

import copy
import os
import time

from .config import RunConfig
from .evaluation import EvalReport
from .train import evaluate_model, make_datasets, train

__all__ = ["GRID_KEYS", "run_ablation", "format_table"]

GRID_KEYS = ("dab", "rs", "fa", "ps", "alpha", "n_queries", "label_assign")
_MODEL_FLAGS = {"dab", "rs", "fa", "ps"}


def _apply(base: RunConfig, overrides: dict) -> RunConfig:
    cfg = copy.deepcopy(base)
    for key, val in overrides.items():
        if key not in GRID_KEYS:
            raise ValueError(f"unknown grid key {key!r}")
        setattr(cfg.model, key, val)
    return cfg


def run_ablation(grid, base: RunConfig, out_dir=None,
                 with_containment: bool = False):
    """grid: list of override dicts. Returns [(overrides, EvalReport,
    seconds), ...] in the requested order."""
    rows = []
    for i, overrides in enumerate(grid):
        cfg = _apply(base, overrides)
        run_dir = None
        if out_dir is not None:
            tag = "_".join(f"{k}-{v}" for k, v in overrides.items()) or "base"
            run_dir = os.path.join(out_dir, f"run{i:02d}_{tag}")
        t0 = time.time()
        model, _ = train(cfg, out_dir=run_dir)
        _, evals = make_datasets(cfg)
        report = evaluate_model(model, evals,
                                with_containment=with_containment)
        rows.append((overrides, report, time.time() - t0))
    return rows


def format_table(rows) -> str:
    with_cont = any(rep.containment is not None for _, rep, _ in rows)
    header = "config                                    AP50   AP75   AP50:95"
    if with_cont:
        header += "  contain"
    lines = [header + "  seconds"]
    for overrides, rep, secs in rows:
        tag = ", ".join(f"{k}={v}" for k, v in overrides.items()) or "(base)"
        line = (f"{tag:<40}  {rep.ap50:5.3f}  {rep.ap75:5.3f}  "
                f"{rep.ap5095:7.3f}")
        if with_cont:
            cont = rep.containment
            line += f"  {cont:7.3f}" if cont is not None else "        -"
        lines.append(line + f"  {secs:7.1f}")
    return "\n".join(lines)
