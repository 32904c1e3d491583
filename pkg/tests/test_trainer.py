import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from protokd import data, ndcore as nd, proto
from protokd.model import SegNetConfig, init_params, predict
from protokd.trainer import (AdamState, IncompatibleModelError, TrainConfig, adam_step, distill_student,
                             poly_lr, select_best, student_graph, teacher_targets, train_teacher)


@pytest.fixture(scope="module")
def tiny():
    cfg = data.GeneratorConfig(height=12, width=12, radius=(2.0, 3.5), n_train=6, n_val=2, n_test=2, seed=5)
    return data.generate(cfg)


MODEL = SegNetConfig(hidden=4, seed=1)
TRAIN = TrainConfig(epochs=2, batch_size=3, lr=1e-2, seed=2)


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), lr=0.1)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_first_step_has_size_lr(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        g = np.array([0.5, -4.0, 1e-3])
        new, _ = adam_step(p, {"w": g}, AdamState.zeros_like(p), lr=0.01)
        np.testing.assert_allclose(p["w"] - new["w"], 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(np.abs(p["w"] - new["w"])[:2], 0.01, rtol=1e-7)

    def test_three_steps_on_square(self):
        lr, x, m, v = 0.1, 2.0, 0.0, 0.0
        params, state = {"x": np.array(2.0)}, AdamState.zeros_like({"x": np.array(2.0)})
        for t in range(1, 4):
            g = 2 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            params, state = adam_step(params, {"x": 2 * params["x"]}, state, lr)
            assert float(params["x"]) == pytest.approx(x, abs=1e-14)

    def test_decoupled_weight_decay(self):
        p = {"w": np.array([4.0])}
        new, _ = adam_step(p, {"w": np.zeros(1)}, AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
        assert new["w"][0] == pytest.approx(4.0 - 0.1 * 0.5 * 4.0, abs=1e-15)

    def test_inputs_untouched(self):
        p = {"w": np.array([1.0])}
        s = AdamState.zeros_like(p)
        adam_step(p, {"w": np.array([3.0])}, s, lr=0.1)
        assert p["w"][0] == 1.0 and s.m["w"][0] == 0.0


def test_poly_lr():
    assert poly_lr(1e-3, 0, 10) == 1e-3
    assert poly_lr(1e-3, 5, 10) == pytest.approx(1e-3 * 0.5 ** 0.9, rel=1e-15)
    assert poly_lr(1e-3, 10, 10) == 0.0
    with pytest.raises(ValueError):
        poly_lr(1e-3, 11, 10)


def test_select_best_prefers_earliest_tie():
    assert select_best([0.1, 0.5, 0.5, 0.2]) == 1
    assert select_best([0.3]) == 0
    with pytest.raises(ValueError):
        select_best([])


@pytest.mark.parametrize("bad", [dict(epochs=-1), dict(batch_size=0), dict(lr=0), dict(alpha=-1),
                                 dict(kl_direction="reverse"), dict(proto_mode="x"), dict(temperature=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_zero_epochs_returns_initial_params(tiny):
    params, log = train_teacher(tiny, MODEL, replace(TRAIN, epochs=0))
    assert same_params(params, init_params(MODEL.with_inputs(3)))
    assert log.epochs == [] and log.best_epoch is None


def test_training_is_deterministic(tiny):
    a, log_a = train_teacher(tiny, MODEL, TRAIN)
    b, log_b = train_teacher(tiny, MODEL, TRAIN)
    assert same_params(a, b)
    assert log_a.to_json(include_timing=False) == log_b.to_json(include_timing=False)
    assert log_a.to_csv() == log_b.to_csv()
    assert "timing" not in log_a.to_dict(include_timing=False)


def test_teacher_needs_multiple_modalities():
    # The generator refuses one-modality configs, so a stand-in carries the shape facts.
    with pytest.raises(IncompatibleModelError):
        train_teacher(SimpleNamespace(modalities=1, classes=3), MODEL, TRAIN)


@pytest.fixture(scope="module")
def teacher(tiny):
    return train_teacher(tiny, MODEL, TRAIN)[0]


def test_teacher_is_frozen_during_distillation(tiny, teacher):
    before = {k: v.copy() for k, v in teacher.items()}
    distill_student(tiny, teacher, 0, MODEL, TRAIN)
    assert same_params(before, teacher)


def test_disabled_terms_match_plain_segmentation_training(tiny, teacher):
    off = replace(TRAIN, use_kd=False, use_proto=False)
    with_teacher, log_a = distill_student(tiny, teacher, 0, MODEL, off)
    without, log_b = distill_student(tiny, None, 0, MODEL, off)
    assert same_params(with_teacher, without)
    assert all(s.l_kd == 0.0 and s.l_proto == 0.0 and s.l_total == s.l_seg for s in log_a.steps)
    assert log_a.to_json(False) == log_b.to_json(False)


def test_logged_total_is_weighted_sum(tiny, teacher):
    train = replace(TRAIN, alpha=3.0, beta=0.7)
    _, log = distill_student(tiny, teacher, 1, MODEL, train)
    assert log.steps
    for s in log.steps:
        assert s.l_total == pytest.approx(s.l_seg + 3.0 * s.l_kd + 0.7 * s.l_proto, abs=1e-12)
        assert s.l_kd > 0 and s.l_proto > 0


@pytest.mark.parametrize("use_kd,use_proto", [(True, False), (False, True)])
def test_masked_term_is_exact_zero(tiny, teacher, use_kd, use_proto):
    _, log = distill_student(tiny, teacher, 0, MODEL, replace(TRAIN, use_kd=use_kd, use_proto=use_proto))
    for s in log.steps:
        assert (s.l_kd == 0.0) != use_kd
        assert (s.l_proto == 0.0) != use_proto
    for e in log.epochs:
        assert (e.l_kd == 0.0) != use_kd


def test_student_matching_teacher_has_zero_distillation_loss(tiny):
    params = init_params(MODEL.with_inputs(1))
    images, labels = data.stack(tiny.train[:2])
    images = images[:, :1]
    t_logits, t_maps = teacher_targets(params, images, labels, 3)
    feats, logits = predict(params, images)
    np.testing.assert_array_equal(t_logits, logits)
    graph = student_graph(list(params), TRAIN, 3)
    values = nd.forward(graph, {**params, "images": images, "labels": labels.reshape(2, -1),
                                "teacher_logits": t_logits, "teacher_map": t_maps})
    assert abs(float(values["kd"])) <= 1e-12
    assert abs(float(values["proto"])) <= 1e-12
    assert float(values["output"]) == pytest.approx(float(values["seg"]), abs=1e-11)


def test_teacher_maps_are_valid_cosines(tiny, teacher):
    images, labels = data.stack(tiny.train)
    _, maps = teacher_targets(teacher, images, labels, 3)
    assert maps.shape == (6, 144, 3)
    assert np.all(np.abs(maps) <= 1 + 1e-12)
    flat = labels.reshape(6, -1)
    present = [np.isin(np.arange(3), flat[b]) for b in range(6)]
    for b in range(6):
        assert np.all(maps[b][:, ~present[b]] == 0.0)
    assert proto.NORM_EPS == 1e-8


def test_distill_errors(tiny, teacher):
    with pytest.raises(IndexError):
        distill_student(tiny, teacher, 3, MODEL, TRAIN)
    with pytest.raises(IncompatibleModelError):
        distill_student(tiny, None, 0, MODEL, TRAIN)
    wide = init_params(SegNetConfig(in_channels=3, hidden=6))
    with pytest.raises(IncompatibleModelError):
        distill_student(tiny, wide, 0, MODEL, TRAIN)
