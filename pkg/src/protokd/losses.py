"""Segmentation and distillation losses as differentiable scalar graphs.

Logits are laid out ``(..., N, K)``: optional leading batch axes, N pixels,
K classes. Labels are integer arrays of shape ``(..., N)``. Every reduction is
a mean over all leading axes, so batch size does not change the scale of a loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .ndcore import Var

DICE_EPS = 1e-5
KL_DIRECTIONS = ("as-paper", "classic")


class LabelError(ValueError):
    """Raised for label maps containing values outside ``[0, K)``."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 0.1
    temperature: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    """Float one-hot encoding with a trailing class axis."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return np.eye(num_classes)[labels.astype(np.int64)]


def _check_pair(op: str, logits: Var, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim < 2:
        raise nd.ShapeError(op, f"logits must be (..., N, K), got {logits.shape}")
    if logits.shape[-1] < 2:
        raise nd.ShapeError(op, "need at least two classes")
    if labels.shape != logits.shape[:-1]:
        raise nd.ShapeError(op, f"labels {labels.shape} do not match logits {logits.shape}")
    return one_hot(labels, logits.shape[-1])


def cross_entropy(logits, labels) -> Var:
    """Mean over pixels of ``-log softmax(logits)[label]``."""
    logits = nd.lift(logits)
    target = _check_pair("cross_entropy", logits, labels)
    picked = nd.sum(nd.log_softmax(logits) * target, axis=-1)
    return -nd.mean(picked)


def dice_loss(logits, labels, eps: float = DICE_EPS, background: bool = True) -> Var:
    """Soft Dice on softmax probabilities, averaged over classes.

    Per class: ``1 - (2 Σ p g + eps) / (Σ p² + Σ g² + eps)``, sums running
    over the pixel axis of each sample. Class 0 joins the average unless
    ``background`` is false.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    logits = nd.lift(logits)
    target = _check_pair("dice_loss", logits, labels)
    probs = nd.softmax(logits)
    overlap = nd.sum(probs * target, axis=-2)
    denom = nd.sum(nd.square(probs), axis=-2) + target.sum(axis=-2)
    per_class = 1.0 - (2.0 * overlap + eps) / (denom + eps)
    if background:
        return nd.mean(per_class)
    k = per_class.shape[-1]
    if k < 2:
        raise LabelError("excluding background leaves no class to average")
    weights = np.full(k, 1.0 / (k - 1))
    weights[0] = 0.0
    return nd.mean(nd.sum(per_class * weights, axis=-1))


def seg_loss(logits, labels, eps: float = DICE_EPS, dice_background: bool = True) -> Var:
    """Hybrid cross-entropy plus Dice segmentation loss."""
    logits = nd.lift(logits)
    return cross_entropy(logits, labels) + dice_loss(logits, labels, eps, dice_background)


def kd_loss(student, teacher, temperature: float, direction: str = "as-paper",
            t_squared: bool = False) -> Var:
    """Pixel-wise KL divergence between temperature-softened class distributions.

    ``direction="as-paper"`` computes ``KL(σ(s/T) ‖ σ(t/T))`` with the student
    first; ``"classic"`` swaps the arguments. The teacher is always a constant.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"direction must be one of {KL_DIRECTIONS}, got {direction!r}")
    student = nd.lift(student)
    teacher_logits = teacher.value if isinstance(teacher, Var) else np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher_logits.shape:
        raise nd.ShapeError("kd_loss", f"student {student.shape} vs teacher {teacher_logits.shape}")
    log_s = nd.log_softmax(student * (1.0 / temperature))
    log_t = nd.log_softmax_array(teacher_logits / temperature)
    if direction == "as-paper":
        per_pixel = nd.sum(nd.exp(log_s) * (log_s - log_t), axis=-1)
    else:
        per_pixel = nd.sum(np.exp(log_t) * (log_t - log_s), axis=-1)
    loss = nd.mean(per_pixel)
    if t_squared:
        loss = loss * temperature ** 2
    return loss


def total_loss(seg, kd, proto, weights: LossWeights) -> Var:
    """``seg + alpha * kd + beta * proto``."""
    return nd.lift(seg) + weights.alpha * nd.lift(kd) + weights.beta * nd.lift(proto)
