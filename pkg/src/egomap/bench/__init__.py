"""Synthetic scene oracle, question generation, and evaluation metrics."""

from .scene import (
    COMPLEXITY_LEVELS,
    GroundTruthBundle,
    MotionLimits,
    SceneBundle,
    SceneObject,
    SceneSpec,
    generate_scene,
    render_frame,
)
from .questions import QAItem, generate_questions
from .metrics import EvalReport, eval_alignment, eval_keyframes, eval_mra

__all__ = [
    "COMPLEXITY_LEVELS",
    "EvalReport",
    "GroundTruthBundle",
    "MotionLimits",
    "QAItem",
    "SceneBundle",
    "SceneObject",
    "SceneSpec",
    "eval_alignment",
    "eval_keyframes",
    "eval_mra",
    "generate_questions",
    "generate_scene",
    "render_frame",
]
