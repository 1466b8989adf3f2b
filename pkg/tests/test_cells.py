"""Cell variants: step contracts, gate ranges, unrolling and gradients."""

import math

import numpy as np
import pytest

from bblstm import cells as C
from bblstm import tape as T
from bblstm.errors import ShapeError, UsageError
from bblstm.objectives import GammaPrior
from bblstm.stochastic import RngStream
from bblstm.tape import Tensor

EULER = 0.5772156649015329
DETERMINISTIC = ("lstm", "cifg")


def make(variant, input_dim=3, hidden=4, seed=0, **kw):
    arrays = C.init_cell_params(variant, input_dim, hidden, np.random.default_rng(seed), **kw)
    return arrays, C.CellParams.from_arrays(variant, arrays)


def zeroed(variant, input_dim=3, hidden=4):
    arrays, _ = make(variant, input_dim, hidden)
    arrays = {k: np.zeros_like(v) for k, v in arrays.items()}
    return C.CellParams.from_arrays(variant, arrays)


def step(variant, params, x, state=None, seed=1, mode="sample"):
    state = state or C.CellState.zeros(x.shape[0], params.hidden)
    rng = RngStream(seed) if variant in C.STOCHASTIC else None
    return C.get_step(variant)(params, Tensor(x), state, rng, None, C.StepOptions(mode))


def fixed_shape_gates(variant, shapes, n=100_000, seed=3):
    """Gates of one step whose shape blocks are forced to ``shapes``."""
    hidden = 1
    arrays, _ = make(variant, 1, hidden)
    arrays = {k: np.zeros_like(v) for k, v in arrays.items()}
    for j, s in enumerate(shapes, start=1):
        k = C.BLOCKS[variant].index(f"U{j}")
        # softplus(b) + floor == s
        arrays["b"][k] = math.log(math.expm1(s - C.SHAPE_FLOOR))
    params = C.CellParams.from_arrays(variant, arrays)
    _, trace = step(variant, params, np.zeros((n, 1)), seed=seed)
    return trace.i.data.ravel(), trace.f.data.ravel()


class TestInit:
    def test_parameter_counts(self):
        n, h = 3, 4
        lstm, _ = make("lstm", n, h)
        cifg, _ = make("cifg", n, h)
        assert C.count_parameters(lstm) == 4 * (n + h + 1) * h
        assert C.count_parameters(lstm) - C.count_parameters(cifg) == (n + h + 1) * h
        assert C.count_parameters(make("bblstm5g", n, h)[0]) == 7 * (n + h + 1) * h

    def test_weights_within_fan_in_bound(self):
        arrays, _ = make("lstm", 5, 11)
        bound = 1 / math.sqrt(16)
        assert np.abs(arrays["Wx"]).max() <= bound and np.abs(arrays["Wh"]).max() <= bound

    def test_forget_bias(self):
        arrays, _ = make("lstm", 3, 4, forget_bias=2.5)
        np.testing.assert_array_equal(arrays["b"][4:8], 2.5)
        assert np.count_nonzero(arrays["b"]) == 4

    def test_recurrent_scale(self):
        a, _ = make("lstm", seed=5)
        b, _ = make("lstm", seed=5, recurrent_scale=0.25)
        np.testing.assert_allclose(b["Wh"], 0.25 * a["Wh"])
        np.testing.assert_array_equal(a["Wx"], b["Wx"])

    def test_shape_forget_bias_opens_forget_gate(self):
        for variant in C.BETA_VARIANTS:
            _, params = make(variant, shape_forget_bias=3.0)
            _, trace = step(variant, params, np.zeros((2, 3)), mode="mean")
            assert trace.f.data.min() > 0.9, variant

    def test_shape_forget_bias_in_deep_gate_networks(self):
        arrays, _ = make("bblstm5g", shape_depth=2, shape_forget_bias=2.0)
        np.testing.assert_array_equal(arrays["g2.bout"], 2.0)
        np.testing.assert_array_equal(arrays["g3.bout"], -2.0)
        np.testing.assert_array_equal(arrays["g1.bout"], 0.0)

    def test_unknown_variant(self):
        with pytest.raises(UsageError):
            C.init_cell_params("gru", 3, 4, np.random.default_rng(0))
        with pytest.raises(UsageError):
            C.get_step("gru")


class TestLSTM:
    def test_zero_weights(self):
        new, trace = step("lstm", zeroed("lstm"), np.ones((2, 3)))
        for g in (trace.i, trace.f, trace.o):
            np.testing.assert_array_equal(g.data, 0.5)
        np.testing.assert_array_equal(new.c.data, 0.0)
        np.testing.assert_array_equal(new.h.data, 0.0)

    def test_saturated_forget_keeps_cell(self):
        arrays = {k: np.zeros_like(v) for k, v in make("lstm")[0].items()}
        arrays["b"][4:8] = 30.0
        arrays["b"][0:4] = -30.0
        params = C.CellParams.from_arrays("lstm", arrays)
        c0 = np.linspace(-1, 1, 8).reshape(2, 4)
        state = C.CellState(Tensor(c0), Tensor(np.zeros((2, 4))))
        new, _ = step("lstm", params, np.zeros((2, 3)), state)
        np.testing.assert_allclose(new.c.data, c0, atol=1e-12)

    def test_hidden_is_output_times_tanh_cell(self, rng):
        _, params = make("lstm")
        new, trace = step("lstm", params, rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(new.h.data, trace.o.data * np.tanh(new.c.data))

    def test_input_shape_mismatch(self):
        _, params = make("lstm")
        with pytest.raises(ShapeError):
            step("lstm", params, np.zeros((2, 5)))


class TestCIFG:
    def test_gates_sum_to_one_exactly(self, rng):
        _, params = make("cifg")
        _, trace = step("cifg", params, 10 * rng.normal(size=(64, 3)))
        assert np.all(trace.i.data + trace.f.data == 1.0)

    def test_zero_weights_half(self):
        _, trace = step("cifg", zeroed("cifg"), np.ones((1, 3)))
        np.testing.assert_array_equal(trace.i.data, 0.5)
        np.testing.assert_array_equal(trace.f.data, 0.5)


class TestG2LSTM:
    def test_low_temperature_is_near_binary(self, rng):
        _, params = make("g2lstm", hidden=16)
        state = C.CellState.zeros(200, 16)
        opts = C.StepOptions("sample", tau=0.05)
        _, trace = C.step_g2lstm(params, Tensor(rng.normal(size=(200, 3))), state, RngStream(2), None, opts)
        i = trace.i.data
        assert np.minimum(i, 1 - i).mean() <= 0.05

    def test_mean_mode_is_plain_sigmoid(self, rng):
        _, params = make("g2lstm")
        x = rng.normal(size=(3, 3))
        _, trace = step("g2lstm", params, x, mode="mean")
        z = x @ params.Wx.data + params.b.data
        np.testing.assert_allclose(trace.i.data, 1 / (1 + np.exp(-z[:, :4])), rtol=1e-14)

    def test_same_seed_same_trace(self, rng):
        _, params = make("g2lstm")
        x = rng.normal(size=(4, 3))
        a = step("g2lstm", params, x, seed=9)[1]
        b = step("g2lstm", params, x, seed=9)[1]
        assert a.i.data.tobytes() == b.i.data.tobytes()

    def test_sampling_needs_rng(self):
        _, params = make("g2lstm")
        with pytest.raises(UsageError):
            C.step_g2lstm(params, Tensor(np.zeros((1, 3))), C.CellState.zeros(1, 4))


class TestShapes:
    @pytest.mark.parametrize("variant", sorted(C.BETA_VARIANTS))
    def test_zero_weights_give_ln2(self, variant):
        params = zeroed(variant)
        U = C.compute_shapes(params, Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 4))))
        assert len(U) == C.num_shape_groups(variant)
        for u in U:
            np.testing.assert_allclose(u.data, math.log(2) + 1e-4, rtol=1e-15)

    def test_positive_for_random_inputs(self, rng):
        _, params = make("bblstm5g", shape_depth=3)
        U = C.compute_shapes(params, Tensor(50 * rng.normal(size=(20, 3))), Tensor(rng.uniform(-1, 1, (20, 4))))
        assert all(np.all(u.data >= 1e-4) for u in U)

    def test_gradient_through_shapes(self, rng):
        arrays, _ = make("bblstm5g", shape_depth=2)
        x, h = rng.normal(size=(3, 3)), rng.uniform(-1, 1, (3, 4))
        w = rng.normal(size=(5, 3, 4))

        def loss(p):
            U = C.compute_shapes(C.CellParams.from_arrays("bblstm5g", p), Tensor(x), Tensor(h))
            return T.sum(T.concat([T.reshape(u * w[j], (1, 12)) for j, u in enumerate(U)]))

        assert T.check_gradients(loss, arrays, probes=30) <= 1e-4


class TestBetaGates:
    @pytest.mark.parametrize("variant", sorted(C.STOCHASTIC))
    def test_gates_in_open_unit_interval(self, variant, rng):
        _, params = make(variant, hidden=8)
        _, trace = step(variant, params, 5 * rng.normal(size=(500, 3)))
        for g in (trace.i, trace.f, trace.o):
            assert np.all((g.data > 0) & (g.data < 1)), variant

    def test_blstm_equal_shapes(self):
        i, f = fixed_shape_gates("blstm", [1.5] * 4)
        assert abs(i.mean() - 0.5) <= 0.01 and abs(f.mean() - 0.5) <= 0.01

    def test_blstm_independent_gates(self):
        i, f = fixed_shape_gates("blstm", [2.0, 1.0, 0.7, 3.0], n=10_000)
        assert abs(np.corrcoef(i, f)[0, 1]) <= 0.03

    def test_blstm_beta_mean(self):
        i, _ = fixed_shape_gates("blstm", [8.0, 0.5, 1.0, 1.0])
        assert abs(i.mean() - 8 / 8.5) <= 0.01

    def test_3g_symmetric_shapes(self):
        i, f = fixed_shape_gates("bblstm3g", [1.0, 1.0, 1.0])
        assert abs(i.mean() - 0.5) <= 0.01 and abs(f.mean() - 0.5) <= 0.01

    @pytest.mark.parametrize("shapes", [[1.0, 1.0, 1.0], [0.2, 5.0, 0.5], [10.0, 0.3, 2.0]])
    def test_3g_never_negatively_correlated(self, shapes):
        i, f = fixed_shape_gates("bblstm3g", shapes, n=10_000)
        assert np.corrcoef(i, f)[0, 1] >= -0.03

    def test_3g_large_shared_shape_closes_both(self):
        i, f = fixed_shape_gates("bblstm3g", [1.0, 1.0, 50.0])
        assert i.mean() <= 0.1 and f.mean() <= 0.1

    def test_5g_anti_aligned(self):
        i, f = fixed_shape_gates("bblstm5g", [0.05, 0.05, 20.0, 0.05, 0.05])
        assert i.mean() >= 0.9 and f.mean() <= 0.1

    def test_5g_both_correlation_signs(self, five_gamma_extremes):
        neg = fixed_shape_gates("bblstm5g", five_gamma_extremes["negative"]["shapes"], n=10_000)
        pos = fixed_shape_gates("bblstm5g", five_gamma_extremes["positive"]["shapes"], n=10_000)
        assert np.corrcoef(*neg)[0, 1] <= -0.2
        assert np.corrcoef(*pos)[0, 1] >= 0.2

    def test_five_gamma_formula(self):
        u = [np.array([v]) for v in (1.0, 2.0, 3.0, 4.0, 5.0)]
        i, f = C.five_gamma_gates(u)
        assert i[0] == (1 + 3) / (1 + 3 + 4 + 5)
        assert f[0] == (2 + 4) / (2 + 3 + 4 + 5)

    def test_mean_mode_blstm_uses_shape_ratio(self, rng):
        _, params = make("blstm")
        _, trace = step("blstm", params, rng.normal(size=(3, 3)), mode="mean")
        U = trace.U
        np.testing.assert_allclose(trace.i.data, U[0].data / (U[0].data + U[1].data))

    def test_sampling_needs_rng(self):
        _, params = make("bblstm5g")
        with pytest.raises(UsageError):
            C.step_bblstm5g(params, Tensor(np.zeros((1, 3))), C.CellState.zeros(1, 4))


class TestPosteriorStep:
    def test_kl_zero_when_prior_matches(self):
        params = zeroed("bblstm5gp")
        prior = GammaPrior.constant(shape=math.log(2) + 1e-4, rate=1.0)
        _, trace = C.step_bblstm5g_p(params, Tensor(np.ones((2, 3))), C.CellState.zeros(2, 4), RngStream(0), prior)
        assert abs(trace.kl.item()) <= 1e-9

    def test_kl_digamma_two(self):
        arrays = {k: np.zeros_like(v) for k, v in make("bblstm5gp", hidden=1)[0].items()}
        for j in range(1, 6):
            arrays["b"][C.BLOCKS["bblstm5gp"].index(f"U{j}")] = math.log(math.expm1(2.0 - C.SHAPE_FLOOR))
        params = C.CellParams.from_arrays("bblstm5gp", arrays)
        prior = GammaPrior.constant(shape=1.0, rate=1.0)
        _, trace = C.step_bblstm5g_p(params, Tensor(np.zeros((1, 3))), C.CellState.zeros(1, 1), RngStream(0), prior)
        assert abs(trace.kl.item() - 5 * (1 - EULER)) <= 1e-9

    def test_kl_nonnegative(self, rng):
        _, params = make("bblstm5gp", hidden=6)
        _, trace = C.step_bblstm5g_p(params, Tensor(rng.normal(size=(8, 3))), C.CellState.zeros(8, 6), RngStream(0))
        assert np.all(trace.kl_rows.data >= 0)


class TestUnroll:
    def test_single_step_equals_step(self, rng):
        _, params = make("lstm")
        x = rng.normal(size=(1, 2, 3))
        res = C.unroll("lstm", [params], x)
        new, _ = step("lstm", params, x[0])
        np.testing.assert_array_equal(res.outputs[0].data, new.h.data)

    def test_empty_sequence(self):
        _, params = make("lstm")
        with pytest.raises(UsageError):
            C.unroll("lstm", [params], np.zeros((0, 2, 3)))

    def test_masked_tail_is_frozen(self, rng):
        _, params = make("bblstm5g")
        x = rng.normal(size=(6, 2, 3))
        mask = np.ones((6, 2))
        mask[3:, 1] = 0
        res = C.unroll("bblstm5g", [params], x, rng=RngStream(1), mask=mask)
        for t in range(3, 6):
            np.testing.assert_array_equal(res.outputs[t].data[1], res.outputs[2].data[1])
        assert not np.array_equal(res.outputs[5].data[0], res.outputs[2].data[0])

    def test_mask_shape_checked(self):
        _, params = make("lstm")
        with pytest.raises(ShapeError):
            C.unroll("lstm", [params], np.zeros((4, 2, 3)), mask=np.ones((4, 3)))

    def test_stacked_layers_feed_forward(self, rng):
        _, p1 = make("lstm", 3, 4, seed=1)
        _, p2 = make("lstm", 4, 5, seed=2)
        x = rng.normal(size=(3, 2, 3))
        res = C.unroll("lstm", [p1, p2], x)
        assert res.outputs[-1].shape == (2, 5)
        lower = C.unroll("lstm", [p1], x)
        upper = C.unroll("lstm", [p2], [o.data for o in lower.outputs])
        np.testing.assert_array_equal(res.outputs[-1].data, upper.outputs[-1].data)

    @pytest.mark.parametrize("variant", DETERMINISTIC)
    def test_two_layer_gradient_check(self, variant, rng):
        a1, _ = make(variant, 3, 8, seed=1)
        a2, _ = make(variant, 8, 8, seed=2)
        arrays = {**{"l0." + k: v for k, v in a1.items()}, **{"l1." + k: v for k, v in a2.items()}}
        x = rng.normal(size=(5, 2, 3))
        w = rng.normal(size=(2, 8))

        def loss(p):
            layers = [C.CellParams.from_arrays(variant, p, f"l{k}.") for k in range(2)]
            res = C.unroll(variant, layers, x)
            return T.sum(res.outputs[-1] * w)

        assert T.check_gradients(loss, arrays, probes=20) <= 1e-4

    @pytest.mark.parametrize("variant", sorted(C.BETA_VARIANTS))
    def test_stochastic_gradient_check(self, variant, rng):
        arrays, _ = make(variant, 3, 4)
        x = rng.normal(size=(4, 2, 3))
        w = rng.normal(size=(2, 4))

        def loss(p):
            res = C.unroll(variant, [C.CellParams.from_arrays(variant, p)], x, rng=RngStream(5))
            total = T.sum(res.outputs[-1] * w)
            return total if res.kl_sum is None else total + res.kl_sum

        assert T.check_gradients(loss, arrays, probes=20, h=1e-6) <= 2e-2

    def test_mean_mode_is_deterministic(self, rng):
        _, params = make("bblstm5g")
        x = rng.normal(size=(5, 2, 3))
        opts = C.StepOptions("mean")
        a = C.unroll("bblstm5g", [params], x, opts=opts).outputs[-1].data
        b = C.unroll("bblstm5g", [params], x, opts=opts).outputs[-1].data
        assert a.tobytes() == b.tobytes()


class TestStepOptions:
    def test_rejects_bad_mode(self):
        with pytest.raises(UsageError):
            C.StepOptions("greedy")

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(UsageError):
            C.StepOptions(tau=0.0)
