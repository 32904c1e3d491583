"""Experiment configuration: one JSON document with a section per concern.

Unknown keys are rejected at every level. After loading, every default is
explicit in :meth:`ExperimentConfig.to_dict`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import GeneratorConfig
from .evaluation import METHODS
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 8
    conv_layers: int = 2


@dataclass(frozen=True)
class EvalSection:
    modalities: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = tuple(METHODS)
    regions: dict[str, tuple[int, ...]] | None = None


# fields of TrainConfig that belong to the run (seed list), not the section
_TRAIN_EXCLUDED = {"seed", "use_kd", "use_proto"}


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output: str = "out"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    threads: int = 1

    def to_dict(self) -> dict:
        gen = dataclasses.asdict(self.generator)
        train = {k: v for k, v in dataclasses.asdict(self.train).items() if k not in _TRAIN_EXCLUDED}
        ev = dataclasses.asdict(self.eval)
        return json.loads(json.dumps({
            "generator": gen,
            "model": dataclasses.asdict(self.model),
            "train": train,
            "eval": ev,
            "output": self.output,
            "seeds": list(self.seeds),
            "threads": self.threads,
        }))


def _section(cls, raw: Any, where: str, exclude=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    ev = dict(raw.get("eval") or {})
    if "modalities" in ev:
        ev["modalities"] = tuple(int(m) for m in ev["modalities"])
    if "methods" in ev:
        ev["methods"] = tuple(ev["methods"])
        bad = [m for m in ev["methods"] if m not in METHODS]
        if bad:
            raise ConfigError(f"eval.methods: unknown methods {bad}")
    if ev.get("regions") is not None:
        ev["regions"] = {str(k): tuple(int(c) for c in v) for k, v in ev["regions"].items()}
    cfg = ExperimentConfig(
        generator=_section(GeneratorConfig, raw.get("generator"), "generator"),
        model=_section(ModelSection, raw.get("model"), "model"),
        train=_section(TrainConfig, raw.get("train"), "train", exclude=_TRAIN_EXCLUDED),
        eval=_section(EvalSection, ev, "eval"),
        output=str(raw.get("output", "out")),
        seeds=tuple(int(s) for s in raw.get("seeds", (0, 1, 2, 3, 4))),
        threads=int(raw.get("threads", 1)),
    )
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    bad_mod = [m for m in cfg.eval.modalities if not 0 <= m < cfg.generator.modalities]
    if bad_mod:
        raise ConfigError(f"eval.modalities {bad_mod} out of range")
    return cfg


def parse_value(text: str):
    """Override values are JSON literals; anything unparsable is taken as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: dict[str, Any]) -> dict:
    """Set ``a.b.c``-style keys in a nested dict (copying, never mutating ``raw``)."""
    out = json.loads(json.dumps(raw))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {dotted}: {p} is not a section")
            node = child
        node[parts[-1]] = value
    return out


def load(path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return from_dict(apply_overrides(raw, overrides or {}))
