import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protokd import ndcore as nd
from protokd.losses import (LabelError, LossWeights, cross_entropy, dice_loss, kd_loss, seg_loss,
                            total_loss)

from oracles import cross_entropy_loops, dice_loss_loops, kd_loss_loops


def val(v):
    return float(v.value)


logit_arrays = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 4)),
                      elements=st.floats(-5, 5))


class TestCrossEntropy:
    def test_uniform(self):
        assert val(cross_entropy(np.zeros((5, 2)), [0, 1, 1, 0, 1])) == pytest.approx(math.log(2), abs=1e-15)
        assert val(cross_entropy(np.zeros((3, 4)), [3, 0, 2])) == pytest.approx(math.log(4), abs=1e-15)

    def test_hand_value(self):
        want = -math.log(math.exp(2) / (math.exp(2) + 1))
        assert val(cross_entropy(np.array([[2.0, 0.0]]), [0])) == pytest.approx(want, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            cross_entropy(np.zeros((2, 3)), [0, 3])

    def test_shape_mismatch(self):
        with pytest.raises(nd.ShapeError):
            cross_entropy(np.zeros((2, 3)), [0, 1, 2])

    @settings(max_examples=40, deadline=None)
    @given(logit_arrays, st.floats(-20, 20), st.randoms())
    def test_shift_invariance(self, logits, shift, rnd):
        labels = [rnd.randrange(logits.shape[1]) for _ in range(logits.shape[0])]
        a = val(cross_entropy(logits, labels))
        b = val(cross_entropy(logits + shift, labels))
        assert abs(a - b) <= 1e-12
        assert a == pytest.approx(cross_entropy_loops(logits.tolist(), labels), abs=1e-12)


class TestDice:
    def test_exact_one_hot(self):
        labels = np.array([0, 2, 1, 1])
        logits = np.eye(3)[labels] * 1000.0
        assert val(dice_loss(logits, labels)) == 0.0

    def test_uniform_balanced(self):
        labels = [0, 1, 0, 1]
        got = val(dice_loss(np.zeros((4, 2)), labels))
        assert got == pytest.approx(dice_loss_loops([[0.0, 0.0]] * 4, labels), abs=1e-12)

    def test_disjoint(self):
        logits = np.tile([-1000.0, 1000.0], (6, 1))
        assert val(dice_loss(logits, [0] * 6)) == pytest.approx(1.0, abs=1e-5)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            dice_loss(np.zeros((2, 2)), [0, 1], eps=0.0)

    @settings(max_examples=40, deadline=None)
    @given(logit_arrays, st.randoms())
    def test_range_and_oracle(self, logits, rnd):
        labels = [rnd.randrange(logits.shape[1]) for _ in range(logits.shape[0])]
        got = val(dice_loss(logits, labels))
        assert -1e-12 <= got <= 1.0 + 1e-5
        assert got == pytest.approx(dice_loss_loops(logits.tolist(), labels), abs=1e-12)


class TestSegLoss:
    def test_perfect(self):
        labels = np.array([1, 0, 2])
        assert val(seg_loss(np.eye(3)[labels] * 1000.0, labels)) == pytest.approx(0.0, abs=1e-12)

    def test_sum_of_parts(self):
        labels = [0, 1, 0, 1]
        want = math.log(2) + dice_loss_loops([[0.0, 0.0]] * 4, labels)
        assert val(seg_loss(np.zeros((4, 2)), labels)) == pytest.approx(want, abs=1e-12)

    def test_monotone_in_correct_logit(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, 6)
        prev = val(seg_loss(logits, labels))
        for _ in range(5):
            logits = logits.copy()
            logits[2, labels[2]] += 0.5
            cur = val(seg_loss(logits, labels))
            assert cur < prev
            prev = cur


class TestKD:
    def test_identical_is_zero(self):
        p = np.random.default_rng(0).normal(size=(7, 3))
        for t in (0.5, 1.0, 10.0):
            assert abs(val(kd_loss(p, p, t))) <= 1e-12

    def test_hand_oracle(self):
        want = kd_loss_loops([[1.0, 0.0]], [[0.0, 0.0]], 1.0)
        assert val(kd_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2)), 1.0)) == pytest.approx(want, abs=1e-14)

    def test_directions_differ(self):
        s, t = np.array([[3.0, 0.0, -1.0]]), np.array([[0.0, 2.0, 0.0]])
        as_paper = val(kd_loss(s, t, 1.0))
        classic = val(kd_loss(s, t, 1.0, direction="classic"))
        assert as_paper == pytest.approx(kd_loss_loops(s.tolist(), t.tolist(), 1.0), abs=1e-12)
        assert classic == pytest.approx(kd_loss_loops(s.tolist(), t.tolist(), 1.0, "classic"), abs=1e-12)
        assert abs(as_paper - classic) > 1e-3

    def test_t_squared_scaling(self):
        s, t = np.array([[1.0, -1.0]]), np.array([[0.0, 0.5]])
        base = val(kd_loss(s, t, 4.0))
        assert val(kd_loss(s, t, 4.0, t_squared=True)) == pytest.approx(16.0 * base, rel=1e-14)

    def test_temperature_flattens(self):
        s, t = np.array([[4.0, 0.0, -2.0]]), np.array([[-1.0, 3.0, 0.0]])
        values = [val(kd_loss(s, t, temp)) for temp in (1, 2, 5, 10, 30, 100)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-3

    def test_teacher_gets_no_gradient(self):
        s, t = np.array([[1.0, 2.0]]), np.array([[0.0, 1.0]])
        g = nd.ComputeGraph(lambda s, t: kd_loss(s, t, 2.0), ("s", "t"))
        grads = nd.backward(g, {"s": s, "t": t})
        np.testing.assert_array_equal(grads["t"], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(nd.ShapeError):
            kd_loss(np.zeros((2, 3)), np.zeros((3, 3)), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(logit_arrays, st.floats(0.1, 50))
    def test_nonnegative(self, logits, temp):
        teacher = logits[::-1].copy()
        assert val(kd_loss(logits, teacher, temp)) >= -1e-12
        assert val(kd_loss(logits, teacher, temp, "classic")) >= -1e-12


class TestTotal:
    def test_paper_weights(self):
        w = LossWeights(alpha=10, beta=0.1)
        assert val(total_loss(1.0, 0.2, 0.5, w)) == pytest.approx(3.05, abs=1e-15)

    def test_zero_weights(self):
        assert val(total_loss(1.7, 0.2, 0.5, LossWeights(0.0, 0.0))) == 1.7

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1)
        with pytest.raises(ValueError):
            LossWeights(temperature=0)

    def test_gradient_decomposes(self):
        rng = np.random.default_rng(4)
        x, t = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        y = rng.integers(0, 3, 6)
        w = LossWeights(alpha=10, beta=0.1)
        proto_term = lambda p: nd.mean(nd.square(nd.softmax(p)))  # noqa: E731
        total = nd.ComputeGraph(lambda p: total_loss(seg_loss(p, y), kd_loss(p, t, 10.0), proto_term(p), w), ("p",))
        parts = [nd.ComputeGraph(f, ("p",)) for f in
                 (lambda p: seg_loss(p, y), lambda p: kd_loss(p, t, 10.0), proto_term)]
        g_seg, g_kd, g_pr = (nd.backward(g, {"p": x})["p"] for g in parts)
        np.testing.assert_allclose(nd.backward(total, {"p": x})["p"], g_seg + 10 * g_kd + 0.1 * g_pr,
                                   rtol=0, atol=1e-12)
        assert nd.grad_check(total, {"p": x}).passed


def test_dice_without_background_averages_foreground_only():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(10, 3))
    labels = rng.integers(0, 3, 10)
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    g = np.eye(3)[labels]
    per_class = 1 - (2 * (probs * g).sum(0) + 1e-5) / ((probs ** 2).sum(0) + g.sum(0) + 1e-5)
    assert val(dice_loss(logits, labels, background=False)) == pytest.approx(per_class[1:].mean(), abs=1e-12)
    assert val(dice_loss(logits, labels)) == pytest.approx(per_class.mean(), abs=1e-12)
    graph = nd.ComputeGraph(lambda p: seg_loss(p, labels, dice_background=False), ("p",))
    assert nd.grad_check(graph, {"p": logits}).passed
