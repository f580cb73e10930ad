"""
Tests for cross-entropy, prototype conformity, the joint loss and nearest-prototype prediction
"""

import math

import numpy as np
import pytest

import tensor_core as tc
from conftest import check_gradients
from exceptions import ConfigurationError, DomainError
from losses import PrototypeSet, cross_entropy, joint_loss, predict_prototype, prototype_conformity
from network import ModelOutput
from tensor_core import Tensor


def _pc(features, labels, centroids) -> float:
    return float(prototype_conformity(Tensor(features), np.asarray(labels), Tensor(centroids)).data)


class TestCrossEntropy:
    """Test the softmax cross-entropy"""

    def test_uniform_logits(self):
        """Zero logits over 10 classes give ln 10"""
        loss = cross_entropy(Tensor(np.zeros((1, 10))), [3])
        assert float(loss.data) == pytest.approx(math.log(10))

    def test_confident_correct_prediction(self):
        """Logit 10 on the true class and 0 elsewhere"""
        logits = np.zeros((1, 10))
        logits[0, 0] = 10.0
        loss = float(cross_entropy(Tensor(logits), [0]).data)
        assert loss == pytest.approx(math.log1p(9 * math.exp(-10)), rel=1e-9)
        assert loss == pytest.approx(4.086e-4, rel=1e-3)

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((4, 5)) * 3
        y = rng.integers(0, 5, 4)
        check_gradients(lambda z: cross_entropy(z, y), logits)


class TestPrototypeConformity:
    """Test the prototype conformity term"""

    def test_two_class_example(self):
        """f on its own centroid, other centroid 5 away: 0 - (5 + 5) = -10"""
        assert _pc([[0.0, 0.0]], [0], [[0.0, 0.0], [5.0, 0.0]]) == pytest.approx(-10.0)

    def test_collapsed_geometry_is_zero(self):
        """Features and centroids all at one point"""
        assert _pc(np.ones((3, 4)), [0, 1, 2], np.ones((3, 4))) == 0.0

    def test_single_class_rejected(self):
        """k = 1 has no other class to push away from"""
        with pytest.raises(ConfigurationError):
            _pc([[0.0]], [0], [[1.0]])

    def test_translation_invariance(self):
        """Shifting features and centroids together leaves the value unchanged"""
        rng = np.random.default_rng(0)
        f, w = rng.standard_normal((6, 3)), rng.standard_normal((3, 3))
        y = [0, 1, 2, 0, 1, 2]
        shift = np.array([4.0, -2.0, 0.5])
        assert _pc(f + shift, y, w + shift) == pytest.approx(_pc(f, y, w), abs=1e-10)

    def test_moving_toward_own_centroid_decreases(self):
        """Halving the distance to w_y along the line to it lowers the loss"""
        w = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
        far = _pc([[-2.0, -2.0]], [0], w)
        near = _pc([[-1.0, -1.0]], [0], w)
        assert near < far

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        """Features and centroids both receive exact gradients"""
        rng = np.random.default_rng(seed)
        f, w = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
        y = rng.integers(0, 4, 5)
        check_gradients(lambda f, w: prototype_conformity(f, y, w), f, w)


class TestJointLoss:
    """Test the deeply supervised objective"""

    def setup_method(self):
        rng = np.random.default_rng(7)
        self.labels = np.array([0, 1, 2, 1])
        self.out = ModelOutput(logits=Tensor(rng.standard_normal((4, 3))),
                               taps=[Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((4, 2)))])
        self.protos = PrototypeSet.initialize(3, [5, 2], seed=0)

    def test_total_is_ce_plus_per_tap_terms(self):
        breakdown = joint_loss(self.out, self.labels, self.protos)
        assert len(breakdown.pc_per_tap) == 2
        assert breakdown.total == pytest.approx(breakdown.ce + sum(breakdown.pc_per_tap), rel=1e-12)
        assert breakdown.ce == pytest.approx(float(cross_entropy(self.out.logits, self.labels).data))

    def test_zero_pc_reduces_to_ce(self):
        """All features on one point with collapsed centroids"""
        out = ModelOutput(logits=self.out.logits, taps=[Tensor(np.ones((4, 5)))])
        protos = PrototypeSet([Tensor(np.ones((3, 5)))])
        breakdown = joint_loss(out, self.labels, protos)
        assert breakdown.total == breakdown.ce

    def test_single_tap_example(self):
        """Uniform two-class logits plus a -10 conformity term"""
        out = ModelOutput(logits=Tensor(np.zeros((1, 2))), taps=[Tensor([[0.0, 0.0]])])
        protos = PrototypeSet([Tensor([[0.0, 0.0], [5.0, 0.0]])])
        assert joint_loss(out, [0], protos).total == pytest.approx(math.log(2) - 10.0)

    def test_removing_a_tap_removes_its_term(self):
        """Taps contribute additively"""
        full = joint_loss(self.out, self.labels, self.protos)
        reduced = joint_loss(ModelOutput(self.out.logits, self.out.taps[:1]), self.labels, self.protos.subset([0]))
        assert reduced.total == pytest.approx(full.total - full.pc_per_tap[1], rel=1e-12)

    def test_weights_scale_terms(self):
        weighted = joint_loss(self.out, self.labels, self.protos, weights=[1.0, 0.5])
        plain = joint_loss(self.out, self.labels, self.protos)
        assert weighted.pc_per_tap[1] == pytest.approx(0.5 * plain.pc_per_tap[1])

    def test_tap_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            joint_loss(self.out, self.labels, self.protos.subset([0]))

    def test_weight_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            joint_loss(self.out, self.labels, self.protos, weights=[1.0])


class TestPredictPrototype:
    """Test nearest-centroid prediction"""

    def test_nearest_centroid(self):
        """f = (0,0), w0 = (1,0), w1 = (0,2) predicts 0"""
        protos = PrototypeSet([Tensor([[1.0, 0.0], [0.0, 2.0]])])
        assert predict_prototype(np.array([[0.0, 0.0]]), protos)[0] == 0

    def test_tie_goes_to_lowest_index(self):
        protos = PrototypeSet([Tensor([[1.0, 0.0], [-1.0, 0.0]])])
        assert predict_prototype(np.array([[0.0, 0.0]]), protos)[0] == 0

    def test_uses_deepest_tap(self):
        """A per-tap list is reduced to its last entry"""
        protos = PrototypeSet([Tensor(np.zeros((2, 3))), Tensor([[0.0], [10.0]])])
        feats = [np.zeros((2, 3)), np.array([[9.0], [1.0]])]
        assert np.array_equal(predict_prototype(feats, protos), [1, 0])

    def test_permuting_classes_permutes_predictions(self):
        rng = np.random.default_rng(1)
        f, w = rng.standard_normal((8, 3)), rng.standard_normal((4, 3))
        perm = np.array([2, 0, 3, 1])
        base = predict_prototype(f, PrototypeSet([Tensor(w)]))
        permuted = predict_prototype(f, PrototypeSet([Tensor(w[perm])]))
        assert np.array_equal(perm[permuted], base)


class TestPrototypeSet:
    """Test centroid initialization and statistics"""

    def test_initialize_shapes_and_determinism(self):
        a = PrototypeSet.initialize(4, [3, 5], seed=2)
        b = PrototypeSet.initialize(4, [3, 5], seed=2)
        assert a.dims == [3, 5] and a.num_classes == 4
        assert a.checksum() == b.checksum()
        assert all(c.requires_grad for c in a.parameters())

    def test_pairwise_stats(self):
        """Centroids at 0, 3 and 4 on a line"""
        protos = PrototypeSet([Tensor([[0.0], [3.0], [4.0]])])
        means, mins = protos.pairwise_stats()
        assert means[0] == pytest.approx((3 + 4 + 1) / 3)
        assert mins[0] == pytest.approx(1.0)

    def test_rows_cover_every_entry(self):
        protos = PrototypeSet.initialize(3, [2, 4], seed=0)
        assert len(list(protos.rows())) == 3 * 2 + 3 * 4

    def test_frozen_shares_data(self):
        protos = PrototypeSet.initialize(2, [2], seed=0)
        frozen = protos.frozen()
        protos[0].data[0, 0] = 42.0
        assert frozen[0].data[0, 0] == 42.0 and not frozen[0].requires_grad


def test_distance_matches_numpy():
    """pairwise_distance agrees with a direct norm"""
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    expected = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    np.testing.assert_allclose(tc.pairwise_distance(Tensor(a), Tensor(b)).data, expected)
