"""Finite-difference gradient suite over every loss graph and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndcore as nd
from . import proto
from .losses import LossWeights, cross_entropy, dice_loss, kd_loss, seg_loss, total_loss
from .model import SegNetConfig, backbone, head, init_params, layer_shapes

STEP = 1e-5
TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    instances: int
    worst: float
    failed: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failed == 0


def _grid(rng) -> tuple[int, int]:
    return int(rng.integers(2, 7)), int(rng.integers(2, 7))


def _labels(rng, n: int, k: int) -> np.ndarray:
    labels = rng.integers(0, k, size=n)
    labels[:k] = np.arange(k)  # every class present
    return rng.permutation(labels)


def _logit_case(rng, k=3):
    h, w = _grid(rng)
    n = h * w
    return rng.uniform(-2, 2, (n, k)), _labels(rng, n, k)


def _case_ce(rng):
    x, y = _logit_case(rng)
    return nd.ComputeGraph(lambda p: cross_entropy(p, y), ("p",), name="cross_entropy"), {"p": x}


def _case_dice(rng):
    x, y = _logit_case(rng)
    return nd.ComputeGraph(lambda p: dice_loss(p, y), ("p",), name="dice_loss"), {"p": x}


def _case_seg(rng):
    x, y = _logit_case(rng)
    return nd.ComputeGraph(lambda p: seg_loss(p, y), ("p",), name="seg_loss"), {"p": x}


def _kd_case(direction, t_squared):
    def build(rng):
        x, _ = _logit_case(rng)
        t = rng.uniform(-2, 2, x.shape)
        temp = float(rng.choice([1.0, 4.0, 10.0]))
        g = nd.ComputeGraph(lambda p: kd_loss(p, t, temp, direction, t_squared), ("p",), name="kd_loss")
        return g, {"p": x}
    return build


def _proto_case(mode):
    def build(rng):
        h, w = _grid(rng)
        n, k, d = h * w, 3, 8
        y = _labels(rng, n, k)
        zt = rng.uniform(-2, 2, (n, d))
        g = nd.ComputeGraph(lambda z: proto.i2fv_pipeline(z, zt, y, k, mode=mode), ("z",), name=f"proto[{mode}]")
        return g, {"z": rng.uniform(-2, 2, (n, d))}
    return build


def _case_total(rng):
    """seg + alpha*kd + beta*proto on a 4×4 grid, differentiated through features and head."""
    n, k, d = 16, 3, 8
    y = _labels(rng, n, k)
    zt = rng.uniform(-2, 2, (n, d))
    t_logits = rng.uniform(-2, 2, (n, k))
    weights = LossWeights()

    def fn(z, w, b):
        logits = nd.matmul(z, w) + b
        return total_loss(seg_loss(logits, y), kd_loss(logits, t_logits, weights.temperature),
                          proto.i2fv_pipeline(z, zt, y, k), weights)

    g = nd.ComputeGraph(fn, ("z", "w", "b"), name="total_loss")
    return g, {"z": rng.uniform(-2, 2, (n, d)), "w": rng.uniform(-1, 1, (d, k)), "b": rng.uniform(-1, 1, k)}


def _case_model(rng):
    """Segmentation loss through backbone and head w.r.t. every parameter tensor (1×6×6 input)."""
    config = SegNetConfig(in_channels=1, hidden=8, classes=3, seed=int(rng.integers(2**31)))
    names = tuple(layer_shapes(config))
    params = init_params(config)
    params = {n: v + rng.uniform(-0.1, 0.1, v.shape) for n, v in params.items()}
    image = rng.uniform(-2, 2, (1, 1, 6, 6))
    y = _labels(rng, 36, 3)[None]

    def fn(**p):
        return seg_loss(head(p, backbone(p, image)), y)

    return nd.ComputeGraph(fn, names, name="model"), params


CASES: dict[str, Callable] = {
    "cross_entropy": _case_ce,
    "dice_loss": _case_dice,
    "seg_loss": _case_seg,
    "kd_loss": _kd_case("as-paper", False),
    "kd_loss_classic_t2": _kd_case("classic", True),
    "proto_kd_loss": _proto_case("intra+inter"),
    "proto_intra_only": _proto_case("intra-only"),
    "total_loss": _case_total,
    "model_forward": _case_model,
}


def gradient_suite(instances: int = 20, seed: int = 0, step: float = STEP, tol: float = TOL,
                   names=None, model_instances: int | None = None) -> list[SuiteResult]:
    """Run ``grad_check`` on ``instances`` random cases of every loss graph."""
    results = []
    for i, name in enumerate(names or CASES):
        rng = np.random.default_rng([seed, i])
        count = model_instances if (name == "model_forward" and model_instances is not None) else instances
        started = time.perf_counter()
        worst, failed = 0.0, 0
        for _ in range(count):
            graph, bindings = CASES[name](rng)
            report = nd.grad_check(graph, bindings, step=step, tol=tol)
            worst = max(worst, report.worst())
            failed += 0 if report.passed else 1
        results.append(SuiteResult(name, count, worst, failed, time.perf_counter() - started))
    return results
