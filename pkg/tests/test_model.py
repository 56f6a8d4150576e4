import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from livar.errors import ShapeError
from livar.lora import LoraAdapter
from livar.model import (
    ClassifierHead,
    ToyBackbone,
    class_variances,
    forward,
    fresh_adapters,
    init_frozen_weights,
    load_snapshot,
    loss_and_grads,
    save_snapshot,
)
from oracles import central_difference, max_relative_error


def random_instance(seed, dims=(5, 4, 4), rank=2, classes=3, batch=6):
    rng = np.random.default_rng(seed)
    W = [rng.normal(size=(dims[i + 1], dims[i])) / 2 for i in range(len(dims) - 1)]
    ads = [LoraAdapter(0.5 * rng.normal(size=(rank, dims[i])),
                       0.5 * rng.normal(size=(dims[i + 1], rank)))
           for i in range(len(dims) - 1)]
    head = ClassifierHead(rng.normal(size=(classes, dims[-1])), rng.normal(size=classes))
    x = rng.normal(size=(batch, dims[0]))
    y = rng.integers(0, classes, size=batch)
    return ToyBackbone(W, ads), head, x, y


def gradient_check_error(seed):
    bb, head, x, y = random_instance(seed)
    _, g = loss_and_grads(bb, head, x, y)
    f = lambda: loss_and_grads(bb, head, x, y)[0]  # noqa: E731
    errs = []
    for l, ad in enumerate(bb.adapters):
        errs.append(max_relative_error(g.a[l], central_difference(f, ad.a)))
        errs.append(max_relative_error(g.b[l], central_difference(f, ad.b)))
    errs.append(max_relative_error(g.head, central_difference(f, head.weights)))
    errs.append(max_relative_error(g.bias, central_difference(f, head.bias)))
    return max(errs)


class TestForward:
    def test_zero_b_equals_frozen_network(self):
        W = init_frozen_weights([6, 8, 8, 5], seed=3)
        bb = ToyBackbone(W, fresh_adapters(W, rank=2, seed=9))
        head = ClassifierHead(np.ones((3, 5)), np.zeros(3))
        x = np.random.default_rng(0).normal(size=(4, 6))
        h = x
        for l, w in enumerate(W):
            h = h @ w.T
            if l < len(W) - 1:
                h = np.tanh(h)
        feats, logits = forward(bb, head, x)
        assert feats.tobytes() == h.tobytes()
        assert logits.tobytes() == (h @ head.weights.T + head.bias).tobytes()

    def test_identity_composition(self):
        W = [np.eye(3)]
        bb = ToyBackbone(W, [LoraAdapter(np.zeros((1, 3)), np.zeros((3, 1)))])
        head = ClassifierHead(np.eye(3), np.zeros(3))
        x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
        _, logits = forward(bb, head, x)
        np.testing.assert_array_equal(logits, x)

    def test_shapes(self):
        bb, head, x, _ = random_instance(0, batch=7)
        feats, logits = forward(bb, head, x)
        assert feats.shape == (7, 4) and logits.shape == (7, 3)

    def test_input_mismatch(self):
        bb, head, _, _ = random_instance(0)
        with pytest.raises(ShapeError):
            forward(bb, head, np.ones((2, 3)))

    def test_non_conformable_chain(self):
        with pytest.raises(ShapeError):
            ToyBackbone([np.ones((4, 3)), np.ones((2, 5))],
                        [LoraAdapter(np.zeros((1, 3)), np.zeros((4, 1))),
                         LoraAdapter(np.zeros((1, 5)), np.zeros((2, 1)))])


class TestLossAndGrads:
    def test_uniform_logits_give_log_c(self):
        W = [np.eye(3)]
        bb = ToyBackbone(W, [LoraAdapter(np.zeros((1, 3)), np.zeros((3, 1)))])
        head = ClassifierHead(np.zeros((4, 3)), np.zeros(4))
        loss, _ = loss_and_grads(bb, head, np.ones((5, 3)), np.array([0, 1, 2, 3, 0]))
        assert loss == pytest.approx(math.log(4))

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        assert gradient_check_error(seed) <= 1e-5

    def test_duplicated_batch_invariance(self):
        bb, head, x, y = random_instance(5)
        loss1, g1 = loss_and_grads(bb, head, x, y)
        loss2, g2 = loss_and_grads(bb, head, np.vstack([x, x]), np.concatenate([y, y]))
        assert loss2 == pytest.approx(loss1, rel=1e-12)
        for a, b in zip(g1.a + g1.b + [g1.head, g1.bias], g2.a + g2.b + [g2.head, g2.bias]):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)

    def test_label_out_of_range(self):
        bb, head, x, _ = random_instance(0)
        with pytest.raises(ValueError):
            loss_and_grads(bb, head, x, np.full(x.shape[0], 3))

    def test_empty_batch(self):
        bb, head, _, _ = random_instance(0)
        with pytest.raises(ValueError):
            loss_and_grads(bb, head, np.zeros((0, 5)), np.zeros(0, dtype=int))

    def test_no_frozen_gradients(self):
        bb, head, x, y = random_instance(0)
        _, g = loss_and_grads(bb, head, x, y)
        assert set(vars(g)) == {"a", "b", "head", "bias"}


def identity_setup(features):
    """Single identity layer so features equal inputs."""
    dim = features.shape[1]
    bb = ToyBackbone([np.eye(dim)], [LoraAdapter(np.zeros((1, dim)), np.zeros((dim, 1)))])
    return bb


class TestClassVariances:
    def test_hand_variance(self):
        # class 0 features [[0,0],[2,0]] both predicted 0 by a head scoring -x1 vs constant
        x = np.array([[0.0, 0.0], [2.0, 0.0]])
        bb = identity_setup(x)
        head = ClassifierHead(np.zeros((2, 2)), np.array([1.0, 0.0]))
        stats = class_variances(bb, head, x, np.array([0, 0]))
        assert stats.sigma[0] == pytest.approx(0.5)
        assert stats.correct_counts.tolist() == [2, 0]
        assert stats.sigma[1] == 0.0

    def test_identical_features_zero(self):
        x = np.ones((4, 3))
        bb = identity_setup(x)
        head = ClassifierHead(np.zeros((2, 3)), np.array([1.0, 0.0]))
        assert class_variances(bb, head, x, np.zeros(4, dtype=int)).sigma[0] == 0.0

    def test_misclassified_excluded(self):
        x = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
        bb = identity_setup(x)
        head = ClassifierHead(np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        # third row scores class 1 (5 > 1) though labelled 0
        stats = class_variances(bb, head, x, np.array([0, 0, 0]))
        assert stats.correct_counts[0] == 2
        assert stats.sigma[0] == pytest.approx(0.5)

    def test_single_correct_sample_is_zero(self):
        x = np.array([[3.0, 1.0]])
        bb = identity_setup(x)
        head = ClassifierHead(np.zeros((2, 2)), np.array([1.0, 0.0]))
        stats = class_variances(bb, head, x, np.array([0]))
        assert stats.correct_counts[0] == 1 and stats.sigma[0] == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        bb, head, _, _ = random_instance(seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(30, 5))
        y = rng.integers(0, 3, size=30)
        perm = rng.permutation(30)
        s1 = class_variances(bb, head, x, y)
        s2 = class_variances(bb, head, x[perm], y[perm])
        np.testing.assert_allclose(s1.sigma, s2.sigma, rtol=1e-12, atol=1e-15)
        assert s1.correct_counts.tolist() == s2.correct_counts.tolist()
        assert np.all(s1.sigma >= 0)
        assert np.all(s1.sigma[s1.correct_counts < 2] == 0)


class TestSnapshot:
    def test_bit_exact_round_trip(self, tmp_path):
        bb, head, _, _ = random_instance(11, dims=(5, 7, 4), rank=2, classes=3)
        path = tmp_path / "model.lvar"
        save_snapshot(path, bb, head)
        bb2, head2 = load_snapshot(path)
        assert path.read_bytes()[:4] == b"LVAR"
        for w1, w2 in zip(bb.frozen_weights, bb2.frozen_weights):
            assert w1.tobytes() == w2.tobytes()
        for a1, a2 in zip(bb.adapters, bb2.adapters):
            assert a1.a.tobytes() == a2.a.tobytes() and a1.b.tobytes() == a2.b.tobytes()
        assert head.weights.tobytes() == head2.weights.tobytes()
        assert head.bias.tobytes() == head2.bias.tobytes()
        save_snapshot(tmp_path / "again.lvar", bb2, head2)
        assert (tmp_path / "again.lvar").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_snapshot(p)
