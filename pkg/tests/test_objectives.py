"""Gamma KL, ELBO, priors, task losses and Adam."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from bblstm import objectives as O
from bblstm import tape as T
from bblstm.errors import DomainError, ShapeError, UsageError
from bblstm.tape import Tensor

EULER = 0.5772156649015329
GRID = [(aq, ap, bp) for aq in (0.5, 1, 2, 5) for ap in (0.5, 1, 2, 5) for bp in (0.5, 1, 2)]


def kl_quadrature(aq, ap, bp):
    q = stats.gamma(aq)
    p = stats.gamma(ap, scale=1 / bp)
    f = lambda u: q.pdf(u) * (q.logpdf(u) - p.logpdf(u))
    # split at 1 so the integrable singularity at 0 is handled by its own panel
    return integrate.quad(f, 0, 1, limit=200)[0] + integrate.quad(f, 1, np.inf, limit=200)[0]


class TestKLGamma:
    def test_equal_distributions(self):
        for a in (0.3, 1.0, 7.5):
            assert abs(O.kl_gamma(a, a, 1.0)) <= 1e-12

    def test_digamma_two(self):
        assert abs(O.kl_gamma(2.0, 1.0, 1.0) - (1 - EULER)) <= 1e-12

    @pytest.mark.parametrize("aq,ap,bp", GRID)
    def test_matches_quadrature(self, aq, ap, bp):
        assert abs(O.kl_gamma(aq, ap, bp) - kl_quadrature(aq, ap, bp)) <= 1e-6

    @pytest.mark.parametrize("aq,ap,bp", [(0.5, 2, 1), (2, 0.5, 1), (1, 1, 2), (1, 1, 0.5), (3, 4, 1.3), (0.2, 0.2, 3)])
    def test_positive_when_different(self, aq, ap, bp):
        assert O.kl_gamma(aq, ap, bp) > 0

    @pytest.mark.parametrize("args", [(0.0, 1, 1), (1, -1, 1), (1, 1, 0), (math.nan, 1, 1), (math.inf, 1, 1)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            O.kl_gamma(*args)

    def test_tensor_matches_scalar(self, rng):
        aq, ap, bp = rng.uniform(0.2, 6, (3, 10))
        out = O.kl_gamma_tensor(aq, ap, bp).data
        np.testing.assert_allclose(out, [O.kl_gamma(*v) for v in zip(aq, ap, bp)], rtol=1e-12, atol=1e-14)

    def test_tensor_gradient(self, rng):
        params = {"aq": rng.uniform(0.5, 4, 6), "ap": rng.uniform(0.5, 4, 6), "bp": rng.uniform(0.5, 2, 6)}
        loss = lambda p: T.sum(O.kl_gamma_tensor(p["aq"], p["ap"], p["bp"]))
        assert T.check_gradients(loss, params, probes=18) <= 1e-4

    def test_tensor_domain(self):
        with pytest.raises(DomainError):
            O.kl_gamma_tensor(np.array([1.0, -1.0]), 1.0, 1.0)


class TestElbo:
    def test_lambda_zero_returns_nll(self):
        assert O.elbo_loss(2.0, 123.0, 0.0) == 2.0

    def test_zero_kl(self):
        assert O.elbo_loss(2.0, 0.0, 0.7) == 2.0

    def test_arithmetic(self):
        assert abs(O.elbo_loss(2.0, 0.5, 0.1) - 2.05) <= 1e-15

    def test_negative_lambda(self):
        with pytest.raises(UsageError):
            O.elbo_loss(1.0, 1.0, -0.1)

    def test_lambda_sweep_values(self):
        assert O.LAMBDA_SWEEP == (0.001, 0.01, 0.1, 1.0)


class TestPriors:
    def test_rbf_zero_distance(self):
        assert O.rbf_prior_shape([1.0, 2.0], [1.0, 2.0], 0.7, 2.5) == 2.5 + 1e-4

    def test_rbf_far_away(self):
        assert abs(O.rbf_prior_shape([0.0], [100.0], 1.0, 1.0) - 1e-4) <= 1e-12

    def test_rbf_unit_distance(self):
        assert abs(O.rbf_prior_shape([0.0, 1.0], [0.0, 0.0], 1.0, 1.0) - (math.exp(-0.5) + 1e-4)) <= 1e-15

    def test_rbf_length_mismatch(self):
        with pytest.raises(UsageError):
            O.rbf_prior_shape([0.0, 1.0], [0.0], 1.0, 1.0)

    def test_rbf_bad_scales(self):
        with pytest.raises(DomainError):
            O.rbf_prior_shape([0.0], [0.0], 0.0, 1.0)

    def test_rbf_tensor_matches_scalar(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        out = O.rbf_prior_shape_tensor(a, b, Tensor(math.log(0.8)), Tensor(math.log(1.7))).data
        want = [O.rbf_prior_shape(x, y, 0.8, 1.7) for x, y in zip(a, b)]
        np.testing.assert_allclose(out.ravel(), want, rtol=1e-14)

    def test_prior_spec_validation(self):
        with pytest.raises((UsageError, DomainError)):
            O.PriorSpec(mode="learned")

    def test_constant_prior(self):
        prior = O.GammaPrior.constant(2.0, 0.5)
        assert [prior.shape(j) for j in range(5)] == [2.0] * 5
        assert prior.rate(4) == 0.5


class TestClassificationLoss:
    def test_equal_logits_give_log_classes(self):
        h = Tensor(np.zeros((6, 3)))
        loss = O.classification_loss(h, [0, 1, 2, 3, 4, 0], Tensor(np.zeros((3, 5))), Tensor(np.zeros(5)))
        assert abs(loss.item() - math.log(5)) <= 1e-15

    def test_confident_correct_is_near_zero(self):
        labels = np.array([0, 2, 1])
        b = np.zeros(3)
        W = 30.0 * np.eye(3)
        h = Tensor(np.eye(3)[labels])
        assert O.classification_loss(h, labels, Tensor(W), Tensor(b)).item() <= 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(UsageError):
            O.classification_loss(Tensor(np.zeros((2, 3))), [0, 4], Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))

    def test_label_shape(self):
        with pytest.raises(ShapeError):
            O.classification_loss(Tensor(np.zeros((2, 3))), [0], Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))

    def test_gradient(self, rng):
        labels = rng.integers(0, 4, 5)
        params = {"h": rng.normal(size=(5, 3)), "W": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}
        loss = lambda p: O.classification_loss(p["h"], labels, p["W"], p["b"])
        assert T.check_gradients(loss, params, probes=20) <= 1e-4

    def test_tagging_matches_per_step_average(self, rng):
        hs = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
        labels = rng.integers(0, 4, (3, 2))
        mask = np.array([[1, 1], [1, 1], [1, 0]], dtype=float)
        W, b = rng.normal(size=(3, 4)), rng.normal(size=4)
        got = O.tagging_loss(hs, labels, mask, Tensor(W), Tensor(b)).item()
        terms = []
        for t in range(3):
            logits = hs[t].data @ W + b
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            terms += [-logp[k, labels[t, k]] for k in range(2) if mask[t, k]]
        assert abs(got - np.mean(terms)) <= 1e-12


class TestPolyphonicNLL:
    def test_half_probability_gives_88_ln2(self):
        T_, B = 4, 3
        targets = (np.arange(T_ * B * 88).reshape(T_, B, 88) % 3 == 0).astype(float)
        hs = [Tensor(np.zeros((B, 5)))] * T_
        loss = O.polyphonic_nll(hs, targets, np.ones((T_, B)), Tensor(np.zeros((5, 88))), Tensor(np.zeros(88)))
        assert abs(loss.item() - 88 * math.log(2)) <= 1e-12

    def test_confident_correct_is_near_zero(self):
        targets = np.array([[[1, 0, 1, 0]], [[0, 0, 1, 1]]], dtype=float)
        # the bias is shared across steps, so the head reads the step from a one-hot h
        loss = O.polyphonic_nll(
            [Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]]))],
            targets,
            np.ones((2, 1)),
            Tensor(40.0 * (2 * targets[:, 0, :] - 1)),
            Tensor(np.zeros(4)),
        )
        assert loss.item() <= 1e-6

    def test_hand_computed_instance(self):
        # T=3, one sequence of length 2 and one of length 3, 4 notes
        targets = np.zeros((3, 2, 4))
        targets[0, 0] = [1, 0, 0, 1]
        targets[1, 0] = [0, 1, 0, 0]
        targets[0, 1] = [1, 1, 1, 1]
        targets[1, 1] = [0, 0, 0, 0]
        targets[2, 1] = [1, 0, 1, 0]
        mask = np.array([[1, 1], [1, 1], [0, 1]], dtype=float)
        logits = np.array([0.3, -1.2, 2.0, 0.0])
        hs = [Tensor(np.ones((2, 1)))] * 3
        got = O.polyphonic_nll(hs, targets, mask, Tensor(logits[None, :]), Tensor(np.zeros(4))).item()
        p = 1 / (1 + np.exp(-logits))

        def frame(y):
            return -sum(math.log(p[k]) if y[k] else math.log(1 - p[k]) for k in range(4))

        seq0 = (frame(targets[0, 0]) + frame(targets[1, 0])) / 2
        seq1 = (frame(targets[0, 1]) + frame(targets[1, 1]) + frame(targets[2, 1])) / 3
        assert abs(got - (seq0 + seq1) / 2) <= 1e-12

    def test_non_binary_targets(self):
        with pytest.raises(UsageError):
            O.polyphonic_nll([Tensor(np.zeros((1, 2)))], np.full((1, 1, 3), 0.5), np.ones((1, 1)),
                             Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_gradient(self, rng):
        targets = (rng.uniform(size=(3, 2, 5)) < 0.3).astype(float)
        mask = np.array([[1, 1], [1, 1], [1, 0]], dtype=float)
        params = {f"h{t}": rng.normal(size=(2, 4)) for t in range(3)}
        params.update(W=rng.normal(size=(4, 5)), b=rng.normal(size=5))
        loss = lambda p: O.polyphonic_nll([p[f"h{t}"] for t in range(3)], targets, mask, p["W"], p["b"])
        assert T.check_gradients(loss, params, probes=20) <= 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        O.adam_step(p, {"w": np.zeros(2)}, O.AdamState())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.zeros(4)}
        O.adam_step(p, {"w": np.array([3.0, -0.01, 250.0, -1.0])}, O.AdamState(), lr=0.01)
        np.testing.assert_allclose(p["w"], -0.01 * np.array([1, -1, 1, -1]), rtol=1e-5)

    def test_quadratic_bowl(self):
        scales = np.array([1.0, 10.0, 0.1])
        p = {"w": np.array([3.0, -2.0, 5.0])}
        state = O.AdamState()
        losses = []
        for _ in range(200):
            losses.append(float(np.sum(scales * p["w"] ** 2)))
            O.adam_step(p, {"w": 2 * scales * p["w"]}, state, lr=0.01)
        assert np.all(np.diff(losses[10:]) < 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            O.adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, O.AdamState())

    def test_missing_gradient_skips_param(self):
        p = {"w": np.ones(2), "frozen": np.ones(2)}
        O.adam_step(p, {"w": np.ones(2)}, O.AdamState())
        np.testing.assert_array_equal(p["frozen"], 1.0)
