"""
Tests for the evaluation attacks and batch dispatch
"""

import numpy as np
import pytest

import tensor_core as tc
from attacks import AdvBatch, attack_dispatch, bim, cw, fgsm, make_loss_fn, mim, pgd, run_attack
from exceptions import ConfigurationError
from losses import cross_entropy, joint_loss
from models import AttackConfig, AttackKind, LossMode
from network import build, mlp_spec, predict_softmax


def _linear_model(weight, bias=None, num_classes=2, input_dim=1):
    model = build(mlp_spec((input_dim,), [], num_classes=num_classes), seed=0)
    model.params["layer1.weight"].data[...] = weight
    model.params["layer1.bias"].data[...] = 0.0 if bias is None else bias
    return model


def _mid_range_inputs(n=6, seed=0):
    """Inputs far enough from 0 and 1 that a 0.1 step is never clipped"""
    return np.random.default_rng(seed).uniform(0.3, 0.7, (n, 1, 8, 8))


class TestFGSM:
    """Test the single-step attack"""

    def test_toy_linear_loss(self):
        """L = 2x with x = 0.5 and epsilon 0.1 moves to 0.6"""
        model = _linear_model([[2.0, 0.0]])
        loss_fn = lambda out, y: tc.sum(out.logits * np.array([[1.0, 0.0]]))  # noqa: E731
        x_adv = fgsm(model, np.array([[0.5]]), np.array([0]), AttackConfig(kind=AttackKind.FGSM, epsilon=0.1),
                     loss_fn=loss_fn)
        assert x_adv[0, 0] == pytest.approx(0.6)

    def test_zero_budget_is_identity(self, untrained_mini):
        model, _ = untrained_mini
        x = _mid_range_inputs()
        x_adv = fgsm(model, x, np.zeros(6, dtype=int), AttackConfig(kind=AttackKind.FGSM, epsilon=0.0))
        assert np.array_equal(x_adv, x)

    def test_every_pixel_moves_zero_or_epsilon(self, untrained_mini):
        model, _ = untrained_mini
        x = _mid_range_inputs()
        x_adv = fgsm(model, x, np.arange(6) % 3, AttackConfig(kind=AttackKind.FGSM, epsilon=0.1))
        delta = np.abs(x_adv - x)
        assert np.all(np.isclose(delta, 0.0) | np.isclose(delta, 0.1))

    def test_single_step_bim_matches_fgsm(self, trained_mini, blobs_test):
        model, protos, _ = trained_mini
        x, y = blobs_test.images[:8], blobs_test.labels[:8]
        one = bim(model, x, y, AttackConfig(kind=AttackKind.BIM, epsilon=0.2, steps=1))
        assert np.array_equal(one, fgsm(model, x, y, AttackConfig(kind=AttackKind.FGSM, epsilon=0.2)))


class TestBudgets:
    """Test the infinity-norm ball and pixel range for every budgeted attack"""

    @pytest.mark.parametrize("kind", [AttackKind.FGSM, AttackKind.BIM, AttackKind.MIM, AttackKind.PGD])
    @pytest.mark.parametrize("epsilon", [0.05, 0.3])
    def test_within_ball_and_range(self, trained_mini, blobs_test, kind, epsilon):
        model, protos, _ = trained_mini
        x, y = blobs_test.images, blobs_test.labels
        x_adv = run_attack(model, x, y, AttackConfig(kind=kind, epsilon=epsilon, steps=5),
                           rng=np.random.default_rng(0))
        assert np.max(np.abs(x_adv - x)) <= epsilon + 1e-12
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0

    @pytest.mark.parametrize("kind", [AttackKind.BIM, AttackKind.MIM, AttackKind.PGD])
    def test_prototype_loss_mode_within_ball(self, trained_mini, blobs_test, kind):
        model, protos, _ = trained_mini
        x, y = blobs_test.images, blobs_test.labels
        x_adv = run_attack(model, x, y, AttackConfig(kind=kind, epsilon=0.1, steps=4, loss_mode=LossMode.CE_PC),
                           protos=protos, rng=np.random.default_rng(0))
        assert np.max(np.abs(x_adv - x)) <= 0.1 + 1e-12

    def test_pgd_zero_budget(self, trained_mini, blobs_test):
        """epsilon 0 returns x exactly despite the random start"""
        model, _, _ = trained_mini
        x, y = blobs_test.images, blobs_test.labels
        x_adv = pgd(model, x, y, AttackConfig(kind=AttackKind.PGD, epsilon=0.0), rng=np.random.default_rng(5))
        assert np.array_equal(x_adv, x)

    def test_attacks_never_touch_parameters(self, trained_mini, blobs_test):
        model, protos, _ = trained_mini
        before = (model.checksum(), protos.checksum())
        x, y = blobs_test.images[:6], blobs_test.labels[:6]
        for kind in AttackKind:
            cfg = AttackConfig(kind=kind, epsilon=0.2, steps=2, iters=3, loss_mode=LossMode.CE_PC)
            run_attack(model, x, y, cfg, protos=protos, rng=np.random.default_rng(0))
        assert (model.checksum(), protos.checksum()) == before
        assert all(p.grad is None for p in model.parameters())


class TestMomentum:
    """Test MIM against BIM"""

    def test_zero_decay_equals_bim(self, trained_mini, blobs_test):
        model, _, _ = trained_mini
        x, y = blobs_test.images, blobs_test.labels
        a = mim(model, x, y, AttackConfig(kind=AttackKind.MIM, epsilon=0.3, steps=10, decay=0.0))
        b = bim(model, x, y, AttackConfig(kind=AttackKind.BIM, epsilon=0.3, steps=10))
        assert np.array_equal(a, b)

    def test_loss_scaling_invariance(self, trained_mini, blobs_test):
        """Multiplying the loss by 10 leaves the normalized momentum path unchanged"""
        model, _, _ = trained_mini
        x, y = blobs_test.images, blobs_test.labels
        cfg = AttackConfig(kind=AttackKind.MIM, epsilon=0.3, steps=10, decay=1.0)
        plain = mim(model, x, y, cfg, loss_fn=lambda out, t: cross_entropy(out.logits, t))
        scaled = mim(model, x, y, cfg, loss_fn=lambda out, t: cross_entropy(out.logits, t) * 10.0)
        assert np.mean(np.isclose(plain, scaled)) > 0.999


class TestPGD:
    """Test random starts and restarts"""

    def test_restarts_never_lower_the_loss(self, trained_mini, blobs_test):
        """The first restart reproduces the single run, later ones only replace it when better"""
        model, _, _ = trained_mini
        x, y = blobs_test.images[:10], blobs_test.labels[:10]
        single = pgd(model, x, y, AttackConfig(kind=AttackKind.PGD, epsilon=0.2, steps=3),
                     rng=np.random.default_rng(9))
        multi = pgd(model, x, y, AttackConfig(kind=AttackKind.PGD, epsilon=0.2, steps=3, restarts=3),
                    rng=np.random.default_rng(9))
        loss = make_loss_fn(LossMode.CE)
        for i in range(10):
            a = float(loss(model(single[i:i + 1]), y[i:i + 1]).data)
            b = float(loss(model(multi[i:i + 1]), y[i:i + 1]).data)
            assert b >= a - 1e-12


class TestCW:
    """Test the L2 attack"""

    def test_crosses_a_linear_boundary(self):
        """Logits (x - 0.5, -x): class 0 only above x = 0.25, so the closest success sits just below it"""
        model = _linear_model([[1.0, -1.0]], bias=[-0.5, 0.0])
        cfg = AttackConfig(kind=AttackKind.CW, c=10.0, lr=0.01, iters=300)
        x_adv = cw(model, np.array([[0.4]]), np.array([0]), cfg)
        assert predict_softmax(model, x_adv)[0] == 1
        assert 0.2 < x_adv[0, 0] < 0.25

    def test_already_misclassified_input_barely_moves(self, trained_mini, blobs_test):
        model, _, _ = trained_mini
        x = blobs_test.images[:5]
        wrong = (predict_softmax(model, x) + 1) % 3
        x_adv = cw(model, x, wrong, AttackConfig(kind=AttackKind.CW, c=1.0, iters=20))
        assert np.max(np.abs(x_adv - x)) < 1e-5

    def test_boundary_pixels_stay_finite(self, untrained_mini):
        """Exact 0 and 1 pixels are nudged inside the tanh domain"""
        model, _ = untrained_mini
        x = np.zeros((2, 1, 8, 8))
        x[1] = 1.0
        x_adv = cw(model, x, np.array([0, 1]), AttackConfig(kind=AttackKind.CW, c=1.0, iters=5))
        assert np.all(np.isfinite(x_adv))
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


class TestLossModes:
    """Test the attacker's objective"""

    def test_prototype_mode_needs_prototypes(self):
        with pytest.raises(ConfigurationError):
            make_loss_fn(LossMode.CE_PC)

    def test_prototype_mode_is_joint_loss(self, trained_mini, blobs_test):
        model, protos, _ = trained_mini
        x, y = blobs_test.images[:6], blobs_test.labels[:6]
        out = model(x)
        value = float(make_loss_fn(LossMode.CE_PC, protos)(out, y).data)
        assert value == pytest.approx(joint_loss(out, y, protos).total)


class TestDispatch:
    """Test batch-wise attack dispatch"""

    def test_unknown_kind(self, trained_mini, blobs_test):
        model, _, _ = trained_mini
        cfg = AttackConfig.model_construct(kind="DEEPFOOL", epsilon=0.1)
        with pytest.raises(ConfigurationError):
            list(attack_dispatch(model, blobs_test, cfg))
        with pytest.raises(ConfigurationError):
            run_attack(model, blobs_test.images, blobs_test.labels, cfg)

    def test_zero_budget_success_is_clean_error(self, trained_mini, blobs_test):
        model, _, _ = trained_mini
        batch = AdvBatch.concat(list(attack_dispatch(model, blobs_test, AttackConfig(kind=AttackKind.FGSM, epsilon=0.0),
                                                     batch_size=7)))
        assert len(batch) == len(blobs_test)
        assert np.array_equal(batch.indices, np.arange(len(blobs_test)))
        assert batch.success_rate() == pytest.approx(float(np.mean(batch.clean_pred != batch.labels)))
        assert np.all(batch.linf() == 0.0)

    def test_same_seed_same_examples(self, trained_mini, blobs_test):
        model, _, _ = trained_mini
        cfg = AttackConfig(kind=AttackKind.PGD, epsilon=0.2, steps=3)
        first = AdvBatch.concat(list(attack_dispatch(model, blobs_test, cfg, seed=4, batch_size=8)))
        second = AdvBatch.concat(list(attack_dispatch(model, blobs_test, cfg, seed=4, batch_size=8)))
        other = AdvBatch.concat(list(attack_dispatch(model, blobs_test, cfg, seed=5, batch_size=8)))
        assert np.array_equal(first.x_adv, second.x_adv)
        assert not np.array_equal(first.x_adv, other.x_adv)

    def test_custom_predictor_decides_success(self, trained_mini, blobs_test):
        """A predictor that always answers 0 succeeds exactly on non-zero labels"""
        model, _, _ = trained_mini
        always_zero = lambda inputs: np.zeros(inputs.shape[0], dtype=np.int64)  # noqa: E731
        batch = AdvBatch.concat(list(attack_dispatch(model, blobs_test, AttackConfig(kind=AttackKind.FGSM, epsilon=0.1),
                                                     predictor=always_zero)))
        assert np.array_equal(batch.success, blobs_test.labels != 0)


@pytest.mark.slow
class TestOnTrainedModel:
    """Test attack strength on the trained blob model"""

    def test_bim_loss_at_least_fgsm_loss(self, trained_mini, blobs_test):
        """BIM ends at a higher CE loss than FGSM with the same budget in at least 80% of batches"""
        model, _, _ = trained_mini
        fgsm_cfg = AttackConfig(kind=AttackKind.FGSM, epsilon=0.1)
        bim_cfg = AttackConfig(kind=AttackKind.BIM, epsilon=0.1, steps=10)
        loss = lambda x, y: float(cross_entropy(model.forward(x).logits, y).data)  # noqa: E731
        wins = []
        for start in range(0, len(blobs_test), 5):
            x, y = blobs_test.images[start:start + 5], blobs_test.labels[start:start + 5]
            wins.append(loss(bim(model, x, y, bim_cfg), y) >= loss(fgsm(model, x, y, fgsm_cfg), y) - 1e-12)
        assert np.mean(wins) >= 0.8, wins

    def test_success_rate_grows_with_budget(self, trained_mini, blobs_test):
        """PGD success never drops by more than one sample as epsilon grows"""
        model, _, _ = trained_mini
        rates = []
        for epsilon in (0.0, 0.1, 0.2, 0.3, 0.5):
            cfg = AttackConfig(kind=AttackKind.PGD, epsilon=epsilon, steps=10)
            rates.append(AdvBatch.concat(list(attack_dispatch(model, blobs_test, cfg, seed=0))).success_rate())
        assert all(b >= a - 1.0 / len(blobs_test) for a, b in zip(rates, rates[1:])), rates
        assert rates[-1] > rates[0]
