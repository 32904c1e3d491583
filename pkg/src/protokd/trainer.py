"""Teacher pre-training and student distillation.

Both phases use Adam with decoupled weight decay and a poly learning-rate
schedule, and keep the parameters of the epoch with the best mean validation
Dice. The teacher is frozen during distillation: its logits and I²FV maps are
computed once per training sample and reused as constants.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import data as data_mod
from . import metrics
from . import ndcore as nd
from . import proto
from .losses import KL_DIRECTIONS, LossWeights, kd_loss, seg_loss
from .model import SegNetConfig, SegNetParams, backbone, head, init_params, predict

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TEACHER_PHASE = 0
STUDENT_PHASE = 1


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    """A loss became non-finite."""

    def __init__(self, phase: str, epoch: int, step: int):
        super().__init__(f"{phase} diverged at epoch {epoch}, step {step}")
        self.phase, self.epoch, self.step = phase, epoch, step


class IncompatibleModelError(TrainingError):
    """Teacher/student/dataset shapes do not fit together."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-5
    poly_power: float = 0.9
    alpha: float = 10.0
    beta: float = 0.1
    temperature: float = 10.0
    kl_direction: str = "as-paper"
    t_squared: bool = False
    proto_mode: str = "intra+inter"
    dice_background: bool = True
    use_kd: bool = True
    use_proto: bool = True
    select_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0 or self.poly_power < 0:
            raise ValueError("weight_decay and poly_power must be non-negative")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.proto_mode not in proto.PROTO_MODES:
            raise ValueError(f"proto_mode must be one of {proto.PROTO_MODES}")
        self.weights  # validates alpha/beta/temperature

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.temperature)


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    l_seg: float
    l_kd: float
    l_proto: float
    l_total: float


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_seg: float
    l_kd: float
    l_proto: float
    l_total: float
    val_dice_mean: float


@dataclass
class TrainLog:
    phase: str
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: list[float] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "lr", "l_seg", "l_kd", "l_proto", "l_total", "val_dice_mean")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for rec in self.epochs:
            writer.writerow([rec.epoch] + [repr(float(getattr(rec, f))) for f in self.CSV_FIELDS[1:]])
        return buf.getvalue()

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "phase": self.phase,
            "best_epoch": self.best_epoch,
            "epochs": [asdict(r) for r in self.epochs],
            "steps": [asdict(r) for r in self.steps],
        }
        if include_timing:
            out["timing"] = {"epoch_wall_seconds": self.wall_time}
        return out

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# optimisation primitives


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: SegNetParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: SegNetParams, grads: SegNetParams, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[SegNetParams, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay ``lr * wd * p``.

    Returns new parameter and state dicts; the inputs are left untouched.
    """
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_params[name] = p - lr * update - lr * weight_decay * p
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def poly_lr(base_lr: float, epoch: int, max_epoch: int, power: float = 0.9) -> float:
    """``base_lr * (1 - epoch / max_epoch) ** power``."""
    if max_epoch <= 0 or not 0 <= epoch <= max_epoch:
        raise ValueError(f"need 0 <= epoch <= max_epoch, got {epoch}/{max_epoch}")
    return base_lr * (1.0 - epoch / max_epoch) ** power


def select_best(val_scores: Sequence[float]) -> int:
    """Index of the highest score; the earliest wins ties."""
    if len(val_scores) == 0:
        raise ValueError("no validation scores to select from")
    best = 0
    for i, score in enumerate(val_scores):
        if score > val_scores[best]:
            best = i
    return best


# ---------------------------------------------------------------------------
# step graphs


def student_graph(param_names: Sequence[str], train: TrainConfig, num_classes: int) -> nd.ComputeGraph:
    """Scalar graph of the distillation objective for one batch.

    Inputs are the parameters (differentiated) plus ``images``, ``labels``,
    ``teacher_logits`` and ``teacher_map`` (constants). Disabled terms are not
    evaluated at all and are reported as exact zeros.
    """
    weights = train.weights

    def fn(**inputs):
        params = {n: inputs[n] for n in param_names}
        labels = inputs["labels"].value.astype(np.int64)
        feats = backbone(params, inputs["images"])
        logits = head(params, feats)
        seg = seg_loss(logits, labels, dice_background=train.dice_background)
        total = seg
        out = {"seg": seg}
        if train.use_kd:
            kd = kd_loss(logits, inputs["teacher_logits"], weights.temperature,
                         train.kl_direction, train.t_squared)
            total = total + weights.alpha * kd
            out["kd"] = kd
        if train.use_proto:
            protos = proto.compute_prototypes(feats, labels, num_classes)
            student_map = proto.i2fv_map(feats, protos)
            if train.proto_mode == "intra-only":
                l_proto = proto.intra_class_loss(student_map, inputs["teacher_map"], labels, num_classes)
            else:
                l_proto = proto.proto_kd_loss(student_map, inputs["teacher_map"], protos.valid)
            total = total + weights.beta * l_proto
            out["proto"] = l_proto
        out["output"] = total
        return out

    inputs = tuple(param_names) + ("images", "labels", "teacher_logits", "teacher_map")
    return nd.ComputeGraph(fn, inputs, wrt=tuple(param_names), name="student_objective")


def evaluate_params(params: SegNetParams, samples: Sequence[data_mod.SyntheticSample],
                    modality: int | None, regions, batch_size: int = 16) -> dict[str, float]:
    """Per-region test Dice of argmax predictions. ``modality=None`` feeds every modality."""
    if not samples:
        return {name: float("nan") for name in regions}
    preds, gts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images, labels = data_mod.stack(chunk)
        if modality is not None:
            images = images[:, modality:modality + 1]
        _, logits = predict(params, images)
        preds.append(logits.argmax(axis=-1).reshape(labels.shape))
        gts.append(labels)
    return metrics.region_dice(np.concatenate(preds), np.concatenate(gts), regions)


def _run(phase: str, params: SegNetParams, batches_for_epoch, graph: nd.ComputeGraph,
         train: TrainConfig, validate) -> tuple[SegNetParams, TrainLog]:
    log = TrainLog(phase)
    state = AdamState.zeros_like(params)
    best_params, best_score = params, -math.inf
    scores = []
    for epoch in range(train.epochs):
        started = time.perf_counter()
        lr = poly_lr(train.lr, epoch, train.epochs, train.poly_power)
        sums = np.zeros(4)
        n_steps = 0
        for step, bindings in enumerate(batches_for_epoch(epoch)):
            values, grads = nd.value_and_grad(graph, {**params, **bindings})
            rec = StepRecord(epoch, step, lr,
                             float(values["seg"]),
                             float(values["kd"]) if "kd" in values else 0.0,
                             float(values["proto"]) if "proto" in values else 0.0,
                             float(values["output"]))
            if not all(math.isfinite(x) for x in (rec.l_seg, rec.l_kd, rec.l_proto, rec.l_total)):
                raise DivergenceError(phase, epoch, step)
            log.steps.append(rec)
            sums += (rec.l_seg, rec.l_kd, rec.l_proto, rec.l_total)
            n_steps += 1
            params, state = adam_step(params, grads, state, lr, train.weight_decay)
        score = metrics.mean_dice(validate(params))
        scores.append(score)
        if score > best_score:
            best_score, best_params = score, params
        means = sums / max(n_steps, 1)
        log.epochs.append(EpochRecord(epoch, lr, *map(float, means), float(score)))
        log.wall_time.append(time.perf_counter() - started)
        logger.debug("%s epoch %d: total %.4f val dice %.4f", phase, epoch, means[3], score)
    if scores:
        log.best_epoch = select_best(scores)
        if train.select_best:
            return best_params, log
    return params, log


def _shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _validator(dataset: data_mod.Dataset, modality: int | None, regions):
    return lambda params: evaluate_params(params, dataset.val, modality, regions)


def train_teacher(dataset: data_mod.Dataset, model_config: SegNetConfig, train: TrainConfig,
                  regions=None) -> tuple[SegNetParams, TrainLog]:
    """Fit the multi-modality teacher with the segmentation loss alone."""
    if dataset.modalities < 2:
        raise IncompatibleModelError("teacher training needs at least two modalities")
    config = model_config.with_inputs(dataset.modalities)
    return _train_teacher(dataset, config, train, regions)


def _train_teacher(dataset, config: SegNetConfig, train: TrainConfig, regions=None):
    if config.classes != dataset.classes:
        raise IncompatibleModelError(f"model has {config.classes} classes, data has {dataset.classes}")
    regions = regions or metrics.default_regions(dataset.classes)
    params = init_params(config)
    teacher_train = replace(train, use_kd=False, use_proto=False)
    graph = student_graph(list(params), teacher_train, dataset.classes)
    images, labels = data_mod.stack(dataset.train) if dataset.train else (None, None)
    rng = np.random.default_rng([train.seed, TEACHER_PHASE])
    dummy = np.zeros(0)

    def batches(epoch):
        for idx in _shuffled_batches(len(dataset.train), train.batch_size, rng):
            yield {"images": images[idx], "labels": labels[idx].reshape(len(idx), -1),
                   "teacher_logits": dummy, "teacher_map": dummy}

    return _run("teacher", params, batches, graph, teacher_train, _validator(dataset, None, regions))


def teacher_targets(teacher: SegNetParams, images: np.ndarray, labels: np.ndarray,
                    num_classes: int, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Frozen teacher logits ``(B, N, K)`` and I²FV maps ``(B, N, K)`` for every sample."""
    logits_out, maps_out = [], []
    for start in range(0, len(images), batch_size):
        feats, logits = predict(teacher, images[start:start + batch_size])
        lab = labels[start:start + batch_size].reshape(len(feats), -1)
        maps_out.append(proto.teacher_i2fv(feats, lab, num_classes))
        logits_out.append(logits)
    return np.concatenate(logits_out), np.concatenate(maps_out)


def distill_student(dataset: data_mod.Dataset, teacher: SegNetParams | None, modality: int,
                    model_config: SegNetConfig, train: TrainConfig,
                    regions=None) -> tuple[SegNetParams, TrainLog]:
    """Train a single-modality student with ``seg + alpha*kd + beta*proto``.

    With both distillation terms disabled the teacher is never consulted and
    this is plain unimodal supervised training.
    """
    if not 0 <= modality < dataset.modalities:
        raise IndexError(f"modality {modality} out of range for {dataset.modalities} modalities")
    regions = regions or metrics.default_regions(dataset.classes)
    config = model_config.with_inputs(1)
    if config.classes != dataset.classes:
        raise IncompatibleModelError(f"model has {config.classes} classes, data has {dataset.classes}")
    params = init_params(config)
    graph = student_graph(list(params), train, dataset.classes)
    images, labels = data_mod.stack(dataset.train) if dataset.train else (None, None)
    flat_labels = labels.reshape(len(labels), -1) if labels is not None else None
    needs_teacher = train.use_kd or train.use_proto
    if needs_teacher:
        if teacher is None:
            raise IncompatibleModelError("distillation terms enabled but no teacher given")
        t_in = teacher["conv0.weight"].shape[1]
        if t_in != dataset.modalities:
            raise IncompatibleModelError(f"teacher takes {t_in} channels, dataset has {dataset.modalities}")
        if teacher["head.bias"].shape[0] != dataset.classes:
            raise IncompatibleModelError("teacher class count differs from dataset")
        if teacher["head.weight"].shape[0] != config.hidden:
            raise IncompatibleModelError("teacher and student feature widths differ")
        t_logits, t_maps = teacher_targets(teacher, images, labels, dataset.classes)
    student_images = images[:, modality:modality + 1] if images is not None else None
    rng = np.random.default_rng([train.seed, STUDENT_PHASE])
    dummy = np.zeros(0)

    def batches(epoch):
        for idx in _shuffled_batches(len(dataset.train), train.batch_size, rng):
            yield {"images": student_images[idx], "labels": flat_labels[idx],
                   "teacher_logits": t_logits[idx] if needs_teacher else dummy,
                   "teacher_map": t_maps[idx] if needs_teacher else dummy}

    return _run("student", params, batches, graph, train, _validator(dataset, modality, regions))
