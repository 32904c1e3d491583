import csv
import json

import numpy as np
import pytest

from protokd import cli, data, fileformat
from protokd.model import SegNetConfig, load_checkpoint
from protokd.trainer import TrainConfig, distill_student

SMALL = {
    "generator": {"height": 12, "width": 12, "radius": [2.0, 3.5], "n_train": 4, "n_val": 2, "n_test": 2},
    "model": {"hidden": 4},
    "train": {"epochs": 2, "batch_size": 2, "lr": 0.01},
    "seeds": [0, 1],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_is_byte_identical(tmp_path, config):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run("gen-data", "--config", config, "--out", a) == 0
    assert run("gen-data", "--config", config, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    header, _ = fileformat.read_file(a, "dataset", 1)
    assert header["counts"] == {"train": 4, "val": 2, "test": 2}
    assert len(data.load(a).train) == 4


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run("show-config", "--config", missing) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["show-config", "--train.nonsense", "3"],
    ["show-config", "--bogus"],
    ["show-config", "--generator.noise", "-1"],
])
def test_bad_configuration_exits_2(argv):
    assert run(*argv) == 2


def test_show_config_applies_overrides(capsys, config):
    assert run("show-config", "--config", config, "--train.epochs", "7", "--generator.noise=0.1") == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["train"]["epochs"] == 7
    assert shown["generator"]["noise"] == 0.1
    assert shown["train"]["alpha"] == 10.0


def test_teacher_distill_evaluate_pipeline(tmp_path, config):
    out = tmp_path / "run"
    assert run("train-teacher", "--config", config, "--out", out) == 0
    teacher = out / "teacher.ckpt"
    assert teacher.exists() and (out / "teacher_log.csv").exists()
    assert run("distill", "--config", config, "--out", out, "--teacher", teacher, "--modality", 0) == 0
    student = out / "student_m0_both.ckpt"
    params, mc, extra = load_checkpoint(student)
    assert mc.in_channels == 1 and extra["modality"] == 0
    assert run("evaluate", "--config", config, "--out", out, "--checkpoint", student) == 0
    rows = list(csv.reader((out / "dice.csv").open()))
    assert [r[0] for r in rows] == ["region", "class1", "class2", "whole", "Avg"]
    assert run("evaluate", "--config", config, "--out", tmp_path / "t", "--checkpoint", teacher) == 0
    # Repeating a command reproduces checkpoints and logs bit for bit.
    again = tmp_path / "again"
    assert run("train-teacher", "--config", config, "--out", again) == 0
    assert (again / "teacher.ckpt").read_bytes() == teacher.read_bytes()
    assert (again / "teacher_log.csv").read_bytes() == (out / "teacher_log.csv").read_bytes()


def test_ablation_none_is_the_unimodal_baseline(tmp_path, config):
    out = tmp_path / "run"
    assert run("distill", "--config", config, "--out", out, "--ablation", "none", "--modality", 2) == 0
    ds = data.generate(data.GeneratorConfig(**{**SMALL["generator"], "radius": (2.0, 3.5)}))
    want, _ = distill_student(ds, None, 2, SegNetConfig(hidden=4, seed=0),
                              TrainConfig(epochs=2, batch_size=2, lr=0.01, use_kd=False, use_proto=False))
    got, _, _ = load_checkpoint(out / "student_m2_none.ckpt")
    assert all(np.array_equal(got[k], want[k]) for k in want)


def test_distill_needs_teacher(tmp_path, config):
    assert run("distill", "--config", config, "--out", tmp_path) == 2


def test_bad_modality_exits_2(tmp_path, config):
    assert run("distill", "--config", config, "--out", tmp_path, "--ablation", "none", "--modality", 9) == 2


def test_corrupt_dataset_exits_2(tmp_path, config):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("train-teacher", "--config", config, "--data", bad, "--out", tmp_path) == 2


def test_ablate_writes_tables(tmp_path, config):
    out = tmp_path / "abl"
    assert run("ablate", "--config", config, "--out", out, "--train.epochs", "1") == 0
    for name in ("records.csv", "summary.csv", "results.json", "ablation_m0.csv", "intra_inter.csv"):
        assert (out / name).exists()
    rows = list(csv.reader((out / "ablation_m0.csv").open()))
    assert len(rows) == 5
    logs = sorted(p.name for p in (out / "logs").glob("*_log.csv"))
    assert "unimodal_m0_s0_log.csv" in logs and "teacher_mall_s1_log.csv" in logs


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--instances", 1) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 9 and all(line.startswith("PASS") for line in lines)
