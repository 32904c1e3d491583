"""``protokd`` command line.

Exit codes: 0 success, 1 internal or numeric failure, 2 usage/config/IO error.
Any config value can be overridden with a flag named by its dotted path,
e.g. ``--train.epochs 5`` or ``--generator.noise=0.1``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checks, data, fileformat, metrics
from . import config as config_mod
from .evaluation import ABLATION_ROWS, INTRA_INTER_ROWS, METHODS, run_matrix
from .model import SegNetConfig, load_checkpoint, save_checkpoint
from .trainer import DivergenceError, IncompatibleModelError, distill_student, evaluate_params, train_teacher

logger = logging.getLogger("protokd")

ABLATIONS = {"none": (False, False), "kd": (True, False), "proto": (False, True), "both": (True, True)}


class UsageError(Exception):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _split_overrides(extra: list[str]) -> dict:
    overrides, i = {}, 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument: {arg}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {arg} needs a value")
            i += 1
            value = extra[i]
        overrides[key] = config_mod.parse_value(value)
        i += 1
    return overrides


def _load_config(args, overrides) -> config_mod.ExperimentConfig:
    if args.config is None:
        return config_mod.from_dict(config_mod.apply_overrides({}, overrides))
    return config_mod.load(args.config, overrides)


def _dataset(args, cfg) -> data.Dataset:
    if getattr(args, "data", None):
        ds = data.load(args.data)
        if ds.config != cfg.generator:
            logger.info("dataset file config differs from --config generator section; using the file")
        return ds
    return data.generate(cfg.generator)


def _model_config(cfg, seed: int) -> SegNetConfig:
    return SegNetConfig(hidden=cfg.model.hidden, classes=cfg.generator.classes,
                        conv_layers=cfg.model.conv_layers, seed=seed)


def _regions(cfg, classes: int):
    return metrics.validate_regions(cfg.eval.regions or metrics.default_regions(classes), classes)


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg.output)


def _write_log(out: Path, stem: str, log) -> None:
    _write(out / f"{stem}_log.csv", log.to_csv())
    _write(out / f"{stem}_log.json", log.to_json())


def cmd_gen_data(args, cfg) -> int:
    ds = data.generate(cfg.generator)
    data.save(ds, args.out)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} samples to {args.out}")
    return 0


def cmd_train_teacher(args, cfg) -> int:
    ds = _dataset(args, cfg)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    regions = _regions(cfg, ds.classes)
    params, log = train_teacher(ds, _model_config(cfg, seed), replace(cfg.train, seed=seed), regions)
    out = _out_dir(args, cfg)
    mc = _model_config(cfg, seed).with_inputs(ds.modalities)
    save_checkpoint(out / "teacher.ckpt", params, mc, {"role": "teacher", "modality": None})
    _write_log(out, "teacher", log)
    print(f"teacher: best epoch {log.best_epoch}, checkpoint {out / 'teacher.ckpt'}")
    return 0


def cmd_distill(args, cfg) -> int:
    ds = _dataset(args, cfg)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    use_kd, use_proto = ABLATIONS[args.ablation]
    teacher = None
    if use_kd or use_proto:
        if not args.teacher:
            raise UsageError("--teacher is required unless --ablation none")
        teacher, _, _ = load_checkpoint(args.teacher)
    train = replace(cfg.train, seed=seed, use_kd=use_kd, use_proto=use_proto)
    regions = _regions(cfg, ds.classes)
    params, log = distill_student(ds, teacher, args.modality, _model_config(cfg, seed), train, regions)
    out = _out_dir(args, cfg)
    stem = f"student_m{args.modality}_{args.ablation}"
    save_checkpoint(out / f"{stem}.ckpt", params, _model_config(cfg, seed).with_inputs(1),
                    {"role": "student", "modality": args.modality, "ablation": args.ablation})
    _write_log(out, stem, log)
    print(f"student: best epoch {log.best_epoch}, checkpoint {out / (stem + '.ckpt')}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    ds = _dataset(args, cfg)
    params, mc, extra = load_checkpoint(args.checkpoint)
    modality = args.modality if args.modality is not None else extra.get("modality")
    if mc.in_channels == 1 and ds.modalities > 1 and modality is None:
        raise UsageError("single-channel checkpoint needs --modality")
    if mc.in_channels != 1 and mc.in_channels != ds.modalities:
        raise IncompatibleModelError(f"checkpoint takes {mc.in_channels} channels, data has {ds.modalities}")
    if mc.in_channels == ds.modalities and mc.in_channels != 1:
        modality = None
    if mc.classes != ds.classes:
        raise IncompatibleModelError(f"checkpoint predicts {mc.classes} classes, data has {ds.classes}")
    regions = _regions(cfg, ds.classes)
    dice = evaluate_params(params, ds.split(args.split), modality, regions)
    rows = ["region,dice"] + [f"{name},{value!r}" for name, value in dice.items()]
    rows.append(f"Avg,{metrics.mean_dice(dice)!r}")
    out = _out_dir(args, cfg)
    _write(out / "dice.csv", "\n".join(rows) + "\n")
    _write(out / "dice.json", json.dumps({"split": args.split, "modality": modality, "dice": dice,
                                          "mean_dice": metrics.mean_dice(dice)}, indent=1, sort_keys=True))
    print("\n".join(rows))
    return 0


def cmd_ablate(args, cfg) -> int:
    ds = _dataset(args, cfg)
    methods = list(dict.fromkeys(ABLATION_ROWS + INTRA_INTER_ROWS))
    threads = int(os.environ.get("PROTOKD_THREADS", cfg.threads))
    result = run_matrix(ds, methods, list(cfg.eval.modalities), list(cfg.seeds), _model_config(cfg, 0),
                        cfg.train, _regions(cfg, ds.classes), threads=threads)
    out = _out_dir(args, cfg)
    _write(out / "records.csv", result.records_csv())
    _write(out / "summary.csv", result.summary_csv())
    _write(out / "results.json", result.to_json())
    for m in cfg.eval.modalities:
        _write(out / f"ablation_m{m}.csv", result.ablation_csv(m))
    _write(out / "intra_inter.csv", result.intra_inter_csv(list(cfg.eval.modalities)))
    for (method, modality, seed), log in result.logs.items():
        mod = "all" if modality is None else modality
        _write_log(out / "logs", f"{method}_m{mod}_s{seed}", log)
    print(result.summary_csv(), end="")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    results = checks.gradient_suite(instances=args.instances, seed=args.seed or 0)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.name:<20} instances={r.instances} worst_rel_err={r.worst:.3e} ({r.seconds:.1f}s)")
    return 0 if ok else 1


def cmd_show_config(args, cfg) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protokd", description="Prototype knowledge distillation laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data_arg=True, out_required=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment JSON (defaults used when omitted)")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--seed", type=int, help="run seed (defaults to the first of config seeds)")
        if data_arg:
            p.add_argument("--data", help="dataset file from gen-data (generated in memory if omitted)")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "generate and save the synthetic dataset", data_arg=False, out_required=True)
    add("train-teacher", cmd_train_teacher, "pre-train the multi-modality teacher")
    p = add("distill", cmd_distill, "train a single-modality student")
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--modality", type=int, default=0)
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default="both",
                   help="distillation terms to enable (none = unimodal baseline)")
    p = add("evaluate", cmd_evaluate, "Dice table for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", type=int)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    add("ablate", cmd_ablate, "loss-component and intra/inter ablation matrix")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss graph", data_arg=False)
    p.add_argument("--instances", type=int, default=20)
    add("show-config", cmd_show_config, "print the fully resolved config", data_arg=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args, _split_overrides(extra))
        return args.func(args, cfg)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"protokd: config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, fileformat.FormatError) as exc:
        print(f"protokd: io error: {exc}", file=sys.stderr)
        return 2
    except (IncompatibleModelError, IndexError) as exc:
        print(f"protokd: incompatible inputs: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"protokd: divergence: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal failure", exc_info=True)
        print(f"protokd: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
