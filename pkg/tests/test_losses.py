import numpy as np
import pytest

from graphteach.errors import ConfigError, ContractError, DimensionError
from graphteach.losses import (
    LossWeights,
    cross_entropy,
    focal_loss,
    total_loss,
    train_logits,
)
from graphteach.numcore import Param, constant, tape

from _gradcheck import check_param_grads


def row(values):
    return constant(np.asarray(values, dtype=np.float64).reshape(1, -1))


class TestTrainLogits:
    def test_delta_zero_reduces_to_test_path(self):
        rng = np.random.default_rng(0)
        zs, cache, graph = (rng.normal(size=(1, 4)) for _ in range(3))
        w = LossWeights(alpha=2.0, delta=0.0)
        out = train_logits(row(zs), row(cache), row(graph), w)
        np.testing.assert_allclose(out.value, zs + 2.0 * cache, atol=1e-14)

    def test_zero_shot_only(self):
        rng = np.random.default_rng(1)
        zs, cache, graph = (rng.normal(size=(1, 3)) for _ in range(3))
        w = LossWeights(alpha=0.0, delta=0.0)
        out = train_logits(row(zs), row(cache), row(graph), w)
        np.testing.assert_allclose(out.value, zs, atol=1e-14)

    def test_recomposition_oracle(self):
        rng = np.random.default_rng(2)
        zs, cache, graph = (rng.normal(size=(1, 5)) for _ in range(3))
        w = LossWeights(alpha=1.5, delta=0.7, tau=50.0)
        out = train_logits(row(zs), row(cache), row(graph), w)
        expected = zs + 1.5 * cache + 0.7 * 50.0 * graph
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            train_logits(row([1.0, 2.0]), row([1.0, 2.0, 3.0]), row([1.0, 2.0]),
                         LossWeights())


class TestCrossEntropy:
    def test_two_way_uniform(self):
        out = cross_entropy(row([0.0, 0.0]), 0)
        assert out.value[0, 0] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated(self):
        out = cross_entropy(row([30.0, 0.0]), 0)
        assert out.value[0, 0] == pytest.approx(9.36e-14, rel=1e-2)

    def test_uniform_five(self):
        out = cross_entropy(row([3.0] * 5), 2)
        assert out.value[0, 0] == pytest.approx(np.log(5.0), abs=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            cross_entropy(row([0.0, 0.0]), 2)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        z = Param(rng.normal(size=(1, 6)), name="z")
        check_param_grads(lambda: cross_entropy(z, 4), [z])


class TestFocalLoss:
    def test_gamma_zero_is_ce_exactly(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(1, 5))
        focal = focal_loss(row(logits), 3, gamma=0.0, tau=7.0)
        ce = cross_entropy(tape.scale(row(logits), 7.0), 3)
        assert focal.value[0, 0] == ce.value[0, 0]

    def test_easy_example_annihilated(self):
        # p_t -> 1 makes the focal factor and the log both vanish
        logits = row([2.0, 0.0, 0.0])
        out = focal_loss(logits, 0, gamma=2.0, tau=100.0)
        assert out.value[0, 0] == pytest.approx(0.0, abs=1e-40)

    def test_uniform_four_way(self):
        # p_t = 0.25, gamma = 2: (0.75)^2 * ln 4
        out = focal_loss(row([0.0, 0.0, 0.0, 0.0]), 1, gamma=2.0, tau=1.0)
        expected = 0.75 ** 2 * np.log(4.0)
        assert out.value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_confidence(self):
        # raising the true-class logit never increases the loss
        losses = []
        for margin in np.linspace(-2.0, 2.0, 9):
            node = focal_loss(row([margin, 0.0]), 0, gamma=2.0, tau=2.0)
            losses.append(node.value[0, 0])
        assert all(a >= b - 1e-15 for a, b in zip(losses, losses[1:]))

    def test_negative_gamma_rejected(self):
        with pytest.raises(ConfigError):
            focal_loss(row([0.0, 1.0]), 0, gamma=-1.0, tau=1.0)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        z = Param(rng.normal(size=(1, 4)), name="z")
        check_param_grads(lambda: focal_loss(z, 2, gamma=2.0, tau=3.0), [z])
        check_param_grads(lambda: focal_loss(z, 2, gamma=0.5, tau=3.0), [z])


class TestTotalLoss:
    def _branches(self, seed):
        rng = np.random.default_rng(seed)
        return (rng.normal(size=(1, 4)), rng.normal(size=(1, 4)),
                0.01 * rng.normal(size=(1, 4)))

    def test_lambda_zero_is_joint_ce_only(self):
        zs, cache, graph = self._branches(6)
        w = LossWeights(lam=0.0)
        out = total_loss(row(zs), row(cache), row(graph), 1, w)
        ce = cross_entropy(train_logits(row(zs), row(cache), row(graph), w), 1)
        assert out.value[0, 0] == ce.value[0, 0]

    def test_lambda_one_gamma_zero_arm(self):
        zs, cache, graph = self._branches(7)
        w = LossWeights(lam=1.0, gamma_focal=0.0)
        out = total_loss(row(zs), row(cache), row(graph), 2, w)
        ce = cross_entropy(train_logits(row(zs), row(cache), row(graph), w), 2)
        graph_ce = cross_entropy(tape.scale(row(graph), w.tau), 2)
        assert out.value[0, 0] == pytest.approx(
            ce.value[0, 0] + graph_ce.value[0, 0], abs=1e-12)

    def test_recomposition(self):
        zs, cache, graph = self._branches(8)
        w = LossWeights(alpha=1.2, delta=0.4, lam=0.8, gamma_focal=1.5, tau=20.0)
        out = total_loss(row(zs), row(cache), row(graph), 3, w)
        ce = cross_entropy(train_logits(row(zs), row(cache), row(graph), w), 3)
        focal = focal_loss(row(graph), 3, 1.5, 20.0)
        expected = ce.value[0, 0] + 0.8 * focal.value[0, 0]
        assert out.value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_non_negative(self):
        for seed in range(10):
            zs, cache, graph = self._branches(100 + seed)
            out = total_loss(row(zs), row(cache), row(graph), seed % 4,
                             LossWeights())
            assert out.value[0, 0] >= 0.0

    def test_teacher_detached_when_delta_lambda_zero(self):
        rng = np.random.default_rng(9)
        graph = Param(rng.normal(size=(1, 4)), name="graph")
        zs = row(rng.normal(size=(1, 4)))
        cache = Param(rng.normal(size=(1, 4)), name="cache")
        w = LossWeights(delta=0.0, lam=0.0)
        from graphteach.numcore import backward

        out = total_loss(zs, cache, graph, 0, w)
        backward(out)
        assert graph.grad is None
        assert cache.grad is not None

    def test_gradients_reach_both_branches(self):
        rng = np.random.default_rng(10)
        graph = Param(rng.normal(size=(1, 4)), name="graph")
        cache = Param(rng.normal(size=(1, 4)), name="cache")
        zs = row(rng.normal(size=(1, 4)))
        w = LossWeights(alpha=1.0, delta=0.5, lam=1.0, gamma_focal=2.0, tau=10.0)
        check_param_grads(lambda: total_loss(zs, cache, graph, 1, w),
                          [graph, cache])

    def test_invalid_weights(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-1.0).validate()
        with pytest.raises(ConfigError):
            LossWeights(tau=0.0).validate()
