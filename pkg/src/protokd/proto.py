"""Class prototypes, I²FV similarity maps and the prototype distillation loss.

Shapes follow the losses module: features ``(..., N, D)``, labels ``(..., N)``,
prototypes ``(..., K, D)`` and similarity maps ``(..., N, K)``. Leading axes
are independent samples; prototypes are never shared across them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .losses import one_hot
from .ndcore import Var

NORM_EPS = 1e-8
PROTO_MODES = ("intra+inter", "intra-only")


class DegenerateInputError(ValueError):
    """Raised when no class is present, so the loss has nothing to average."""


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class mean embeddings.

    ``prototypes`` has shape (..., K, D); rows of absent classes are zero and
    ``valid`` (shape (..., K)) is False for them.
    """

    prototypes: Var
    valid: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.valid.shape[-1]


def _swap_last(x: Var) -> Var:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return nd.transpose(x, axes)


def compute_prototypes(features, labels, num_classes: int) -> PrototypeSet:
    """Mean feature of every class present in ``labels``; differentiable in ``features``."""
    features = nd.lift(features)
    labels = np.asarray(labels)
    if features.ndim < 2 or labels.shape != features.shape[:-1]:
        raise nd.ShapeError("compute_prototypes",
                            f"features {features.shape} do not match labels {labels.shape}")
    mask = one_hot(labels, num_classes)                      # (..., N, K)
    counts = mask.sum(axis=-2)                               # (..., K)
    valid = counts > 0
    inv = np.where(valid, 1.0 / np.where(valid, counts, 1.0), 0.0)
    sums = nd.matmul(np.swapaxes(mask, -1, -2), features)    # (..., K, D)
    return PrototypeSet(sums * inv[..., None], valid)


def i2fv_map(features, protos: PrototypeSet, eps: float = NORM_EPS) -> Var:
    """Cosine similarity between every pixel feature and every class prototype.

    Norms are clamped below at ``eps``; columns of absent classes are zeroed.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    features = nd.lift(features)
    centers = protos.prototypes
    if features.shape[-1] != centers.shape[-1]:
        raise nd.ShapeError("i2fv_map", f"feature dim {features.shape[-1]} vs prototype dim {centers.shape[-1]}")
    z_norm = nd.clamp_min(nd.l2norm(features, axis=-1), eps)       # (..., N, 1)
    c_norm = nd.clamp_min(nd.l2norm(centers, axis=-1), eps)        # (..., K, 1)
    dots = nd.matmul(features, _swap_last(centers))                # (..., N, K)
    sim = dots / (z_norm * _swap_last(c_norm))
    return sim * protos.valid[..., None, :].astype(np.float64)


def proto_kd_loss(student_map, teacher_map, valid) -> Var:
    """Mean squared difference of two similarity maps over valid classes.

    Each sample is normalised by ``N * K_valid``; samples are then averaged.
    The teacher map is a constant.
    """
    student_map = nd.lift(student_map)
    target = teacher_map.value if isinstance(teacher_map, Var) else np.asarray(teacher_map, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if student_map.shape != target.shape:
        raise nd.ShapeError("proto_kd_loss", f"student map {student_map.shape} vs teacher map {target.shape}")
    if valid.shape != student_map.shape[:-2] + student_map.shape[-1:]:
        raise nd.ShapeError("proto_kd_loss", f"valid mask {valid.shape} does not fit map {student_map.shape}")
    k_valid = valid.sum(axis=-1)
    if np.any(k_valid == 0):
        raise DegenerateInputError("proto_kd_loss: a sample has no valid class")
    n_pixels = student_map.shape[-2]
    diff = student_map - target
    per_sample = nd.sum(nd.square(diff) * valid[..., None, :].astype(np.float64), axis=(-2, -1))
    return nd.mean(per_sample * (1.0 / (n_pixels * k_valid)))


def intra_class_loss(student_map, teacher_map, labels, num_classes: int) -> Var:
    """Squared map difference restricted to each pixel's own class, normalised by N."""
    student_map = nd.lift(student_map)
    target = teacher_map.value if isinstance(teacher_map, Var) else np.asarray(teacher_map, dtype=np.float64)
    mask = one_hot(labels, num_classes)
    if mask.shape != student_map.shape:
        raise nd.ShapeError("intra_class_loss", f"labels do not fit map {student_map.shape}")
    n_pixels = student_map.shape[-2]
    per_sample = nd.sum(nd.square(student_map - target) * mask, axis=(-2, -1))
    return nd.mean(per_sample * (1.0 / n_pixels))


def teacher_i2fv(features_t, labels, num_classes: int, eps: float = NORM_EPS) -> np.ndarray:
    """Teacher similarity map as a plain array (no gradient)."""
    feats = features_t.value if isinstance(features_t, Var) else np.asarray(features_t, dtype=np.float64)
    protos = compute_prototypes(feats, labels, num_classes)
    return i2fv_map(feats, protos, eps).value


def i2fv_pipeline(features_s, features_t, labels, num_classes: int, eps: float = NORM_EPS,
                  mode: str = "intra+inter") -> Var:
    """Prototype distillation loss from student and teacher pixel features.

    Both prototype sets come from the same ground-truth labels. Gradients flow
    into the student features directly and through the student prototypes.
    """
    if mode not in PROTO_MODES:
        raise ValueError(f"mode must be one of {PROTO_MODES}, got {mode!r}")
    features_s = nd.lift(features_s)
    target = teacher_i2fv(features_t, labels, num_classes, eps)
    protos_s = compute_prototypes(features_s, labels, num_classes)
    student_map = i2fv_map(features_s, protos_s, eps)
    if mode == "intra-only":
        return intra_class_loss(student_map, target, labels, num_classes)
    return proto_kd_loss(student_map, target, protos_s.valid)
