"""Trainable text-guided keyframe selection with teacher-student fusion
distillation, verified on a planted-keyframe synthetic video-QA benchmark."""

from .tensor import Tensor, backward, grad_check

__all__ = ["Tensor", "backward", "grad_check"]
__version__ = "0.1.0"
