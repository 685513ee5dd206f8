"""Synthetic data, training and evaluation loops, ablation runner,
sampling-point visualization, and the command line interface."""

from .scenes import SceneParams, SyntheticScene, gen_scene
from .evaluation import EvalReport, evaluate

__all__ = [
    "SceneParams",
    "SyntheticScene",
    "gen_scene",
    "EvalReport",
    "evaluate",
]
