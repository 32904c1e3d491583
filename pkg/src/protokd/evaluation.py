"""Experiment matrix: every (method, modality, seed) cell trained and scored.

Teachers are trained once per seed and shared by all cells of that seed.
Per-method summaries carry a paired t-test (pairs are seeds) against the
unimodal baseline on the same modality.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics, stats
from .data import Dataset
from .model import SegNetConfig, SegNetParams
from .trainer import TrainConfig, TrainLog, distill_student, evaluate_params, train_teacher

logger = logging.getLogger(__name__)

BASELINE = "unimodal"
TEACHER = "teacher"
SIGNIFICANCE = 0.05

# method -> (use_kd, use_proto, proto_mode)
METHODS: dict[str, tuple[bool, bool, str]] = {
    "unimodal": (False, False, "intra+inter"),
    "kd": (True, False, "intra+inter"),
    "proto": (False, True, "intra+inter"),
    "protokd": (True, True, "intra+inter"),
    "protokd-intra": (True, True, "intra-only"),
}

ABLATION_ROWS = ("unimodal", "kd", "proto", "protokd")
INTRA_INTER_ROWS = ("protokd-intra", "protokd")


class CellError(RuntimeError):
    """A training failure annotated with the matrix cell that raised it."""

    def __init__(self, method: str, modality, seed: int, cause: Exception):
        super().__init__(f"cell (method={method}, modality={modality}, seed={seed}) failed: {cause}")
        self.method, self.modality, self.seed, self.cause = method, modality, seed, cause


@dataclass
class MetricsRecord:
    method: str
    modality: int | None       # None for the all-modality teacher
    seed: int
    dice: dict[str, float]
    mean_dice: float
    l_kd: float | None = None
    l_proto: float | None = None
    best_epoch: int | None = None


@dataclass
class SummaryRow:
    method: str
    modality: int | None
    dice: dict[str, float]
    mean_dice: float
    n: int
    t: float | None = None
    p: float | None = None
    significant: bool = False


@dataclass
class MatrixResult:
    records: list[MetricsRecord]
    summary: list[SummaryRow]
    regions: dict[str, tuple[int, ...]]
    logs: dict[tuple, TrainLog] = field(default_factory=dict, repr=False)

    def rows_for(self, method: str, modality) -> list[MetricsRecord]:
        return sorted((r for r in self.records if r.method == method and r.modality == modality),
                      key=lambda r: r.seed)

    def summary_for(self, method: str, modality) -> SummaryRow:
        for row in self.summary:
            if row.method == method and row.modality == modality:
                return row
        raise KeyError((method, modality))

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.regions)
        w.writerow(["method", "modality", "seed", *names, "Avg", "l_kd", "l_proto", "best_epoch"])
        for r in self.records:
            w.writerow([r.method, _fmt_mod(r.modality), r.seed, *(_num(r.dice[n]) for n in names),
                        _num(r.mean_dice), _num(r.l_kd), _num(r.l_proto),
                        "" if r.best_epoch is None else r.best_epoch])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.regions)
        w.writerow(["method", "modality", *names, "Avg", "n", "t", "p", "significant"])
        for s in self.summary:
            w.writerow([s.method, _fmt_mod(s.modality), *(_num(s.dice[n]) for n in names),
                        _num(s.mean_dice), s.n, _num(s.t), _num(s.p), "*" if s.significant else ""])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "regions": {k: list(v) for k, v in self.regions.items()},
            "records": [asdict(r) for r in self.records],
            "summary": [asdict(s) for s in self.summary],
        }
        return json.dumps(payload, indent=1, sort_keys=True, default=_json_default)

    def ablation_csv(self, modality: int) -> str:
        """Loss-component ablation: one row per enabled-term combination."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L_seg", "L_kd", "L_proto", "Avg", "delta", "p", "significant"])
        base = self.summary_for(BASELINE, modality).mean_dice
        for method in ABLATION_ROWS:
            s = self.summary_for(method, modality)
            use_kd, use_proto, _ = METHODS[method]
            w.writerow(["x", "x" if use_kd else "", "x" if use_proto else "", _num(s.mean_dice),
                        _num(s.mean_dice - base), _num(s.p), "*" if s.significant else ""])
        return buf.getvalue()

    def intra_inter_csv(self, modalities: Sequence[int]) -> str:
        """Intra-class only versus intra+inter-class transfer, one column per modality."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["intra", "inter", *(f"modality{m}" for m in modalities)])
        for method in INTRA_INTER_ROWS:
            inter = "x" if METHODS[method][2] == "intra+inter" else ""
            w.writerow(["x", inter, *(_num(self.summary_for(method, m).mean_dice) for m in modalities)])
        return buf.getvalue()


def _fmt_mod(m) -> str:
    return "all" if m is None else str(m)


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def summarize(records: Sequence[MetricsRecord], regions) -> list[SummaryRow]:
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.modality), []).append(r)
    summary = []
    for (method, modality), rows in groups.items():
        rows = sorted(rows, key=lambda r: r.seed)
        row = SummaryRow(method, modality,
                         {n: float(np.mean([r.dice[n] for r in rows])) for n in regions},
                         float(np.mean([r.mean_dice for r in rows])), len(rows))
        base = groups.get((BASELINE, modality))
        if method not in (BASELINE, TEACHER) and base is not None:
            by_seed = {r.seed: r.mean_dice for r in base}
            paired = [(r.mean_dice, by_seed[r.seed]) for r in rows if r.seed in by_seed]
            if len(paired) >= 2:
                try:
                    res = stats.paired_t_test([a for a, _ in paired], [b for _, b in paired])
                    row.t, row.p = res.t, res.p
                    row.significant = res.p <= SIGNIFICANCE
                except stats.DegenerateSampleError:
                    logger.info("no t-test for %s on modality %s: identical scores", method, modality)
        summary.append(row)
    order = {m: i for i, m in enumerate((TEACHER,) + tuple(METHODS))}
    summary.sort(key=lambda s: (order.get(s.method, len(order)), -1 if s.modality is None else s.modality))
    return summary


def run_matrix(dataset: Dataset, methods: Sequence[str], modalities: Sequence[int], seeds: Sequence[int],
               model_config: SegNetConfig, train_config: TrainConfig, regions=None,
               threads: int = 1) -> MatrixResult:
    """Train and score every (method, modality, seed) cell plus one teacher per seed."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    regions = metrics.validate_regions(regions or metrics.default_regions(dataset.classes), dataset.classes)
    needs_teacher = any(METHODS[m][0] or METHODS[m][1] for m in methods)

    def teacher_cell(seed):
        try:
            params, log = train_teacher(dataset, replace(model_config, seed=seed), replace(train_config, seed=seed),
                                        regions)
        except Exception as exc:
            raise CellError(TEACHER, None, seed, exc) from exc
        dice = evaluate_params(params, dataset.test, None, regions)
        return seed, params, log, MetricsRecord(TEACHER, None, seed, dice, metrics.mean_dice(dice),
                                                best_epoch=log.best_epoch)

    teachers: dict[int, SegNetParams] = {}
    records: list[MetricsRecord] = []
    logs: dict[tuple, TrainLog] = {}
    if needs_teacher:
        for seed, params, log, rec in _map(teacher_cell, list(seeds), threads):
            teachers[seed] = params
            logs[(TEACHER, None, seed)] = log
            records.append(rec)

    def student_cell(cell):
        method, modality, seed = cell
        use_kd, use_proto, mode = METHODS[method]
        tc = replace(train_config, seed=seed, use_kd=use_kd, use_proto=use_proto, proto_mode=mode)
        try:
            params, log = distill_student(dataset, teachers.get(seed), modality,
                                          replace(model_config, seed=seed), tc, regions)
        except Exception as exc:
            raise CellError(method, modality, seed, exc) from exc
        dice = evaluate_params(params, dataset.test, modality, regions)
        last = log.epochs[-1] if log.epochs else None
        rec = MetricsRecord(method, modality, seed, dice, metrics.mean_dice(dice),
                            l_kd=last.l_kd if (last and use_kd) else None,
                            l_proto=last.l_proto if (last and use_proto) else None,
                            best_epoch=log.best_epoch)
        return cell, log, rec

    cells = [(m, mod, s) for m in methods for mod in modalities for s in seeds]
    for cell, log, rec in _map(student_cell, cells, threads):
        logs[cell] = log
        records.append(rec)
    return MatrixResult(records, summarize(records, regions), regions, logs)
