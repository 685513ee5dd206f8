"""Flat key=value run configuration, round-trippable to a text file."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from ..losses import FocalParams, LossWeights
from ..model import ModelConfig

__all__ = ["RunConfig", "parse_config", "format_config",
           "load_config", "save_config"]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-3
    steps: int = 600
    batch: int = 2
    seed: int = 0
    n_train: int = 200
    n_eval: int = 50
    log_every: int = 25
    image_size: int = 64
    density: int = 3
    dense: bool = False
    overfit: bool = False   # single-image preset


_MODEL_KEYS = ("stage_mode", "n_enc", "n_dec", "m_align", "d_model", "heads",
               "points", "n_queries", "num_classes", "alpha", "rs", "fa",
               "dab", "ps", "d_pe", "anchor_scale", "angle_range",
               "label_assign", "o2m_k")
_RUN_KEYS = ("lr", "weight_decay", "steps", "batch", "seed", "n_train",
             "n_eval", "log_every", "image_size", "density", "dense",
             "overfit")
_WEIGHT_KEYS = ("w_cls", "w_reg", "w_iou")

_BOOL_KEYS = {"rs", "fa", "dab", "ps", "dense", "overfit"}
_INT_KEYS = {"n_enc", "n_dec", "m_align", "d_model", "heads", "points",
             "n_queries", "num_classes", "d_pe", "o2m_k", "steps", "batch",
             "seed", "n_train", "n_eval", "log_every", "image_size",
             "density"}
_STR_KEYS = {"stage_mode", "label_assign"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _STR_KEYS:
        return raw
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if key == "alpha":
        return None if raw.lower() in ("none", "inf", "off") else float(raw)
    if key in _INT_KEYS:
        return int(raw)
    return float(raw)


def parse_config(text: str) -> RunConfig:
    """Parse 'key = value' lines; '#' starts a comment; unknown keys error."""
    cfg = RunConfig()
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        val = _parse_value(key, raw)
        if key in _MODEL_KEYS:
            setattr(cfg.model, key, val)
        elif key in _RUN_KEYS:
            setattr(cfg, key, val)
        elif key == "w_cls":
            cfg.model.weights.cls = val
        elif key == "w_reg":
            cfg.model.weights.reg = val
        elif key == "w_iou":
            cfg.model.weights.iou = val
        else:
            raise ValueError(f"line {ln}: unknown key {key!r}")
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key in _MODEL_KEYS:
        val = getattr(cfg.model, key)
        if val is None:
            val = "none"
        lines.append(f"{key} = {val}")
    lines.append(f"w_cls = {cfg.model.weights.cls}")
    lines.append(f"w_reg = {cfg.model.weights.reg}")
    lines.append(f"w_iou = {cfg.model.weights.iou}")
    for key in _RUN_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
