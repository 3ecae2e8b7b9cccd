import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ccgan import autodiff as ad
from ccgan import nn
from ccgan.errors import DimensionError, FormatError, NumericError, SpecError

from conftest import FD_RTOL, check_param_gradients


def _loss_of(net, x, rng):
    # random output weights; a plain sum of softmax rows would be constant
    mix = rng.standard_normal((x.shape[0], net.spec.layer_dims[-1]))
    return lambda tape, bound: ad.reduce(nn.forward(bound[0], tape.constant(x)) * tape.constant(mix), "sum")


class TestMlpSpec:
    def test_four_layers_means_four_weight_matrices(self):
        spec = nn.MlpSpec((16,) * 5)
        assert spec.n_layers == 4
        assert len(nn.init_params(spec, 0).weights) == 4

    @pytest.mark.parametrize("dims", [(3,), (3, 0, 2), (4, -1)])
    def test_bad_dims(self, dims):
        with pytest.raises(SpecError):
            nn.MlpSpec(dims)

    def test_bad_activation(self):
        with pytest.raises(SpecError):
            nn.MlpSpec((2, 2), "gelu")


class TestInit:
    def test_deterministic(self):
        spec = nn.MlpSpec((5, 7, 3))
        assert nn.init_params(spec, 4).equals(nn.init_params(spec, 4))
        assert not nn.init_params(spec, 4).equals(nn.init_params(spec, 5))

    def test_zero_biases(self):
        params = nn.init_params(nn.MlpSpec((5, 7, 3)), 1)
        assert all(not b.any() for b in params.biases)

    def test_glorot_statistics(self):
        w = nn.init_params(nn.MlpSpec((256, 256)), 0).weights[0]
        limit = math.sqrt(6.0 / 512)
        assert np.abs(w).max() <= limit
        sigma = limit / math.sqrt(3.0)
        assert abs(w.mean()) < 3 * sigma / math.sqrt(w.size)

    def test_flat_buffer_is_shared(self):
        params = nn.init_params(nn.MlpSpec((2, 3, 1)), 0)
        params.flat[:] = 7.0
        assert (params.weights[1] == 7.0).all()
        assert (params.biases[0] == 7.0).all()


class TestForward:
    def test_zero_net_gives_zero(self):
        spec = nn.MlpSpec((3, 4, 2))
        params = nn.MlpParams(spec, [np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros((1, 4)), np.zeros((1, 2))])
        assert_array_equal(nn.apply(params, np.ones((5, 3))), np.zeros((5, 2)))

    def test_single_layer_is_affine(self, rng):
        w, b = rng.standard_normal((3, 2)), rng.standard_normal((1, 2))
        params = nn.MlpParams(nn.MlpSpec((3, 2)), [w], [b])
        x = rng.standard_normal((4, 3))
        assert_allclose(nn.apply(params, x), x @ w + b, rtol=1e-14)

    def test_output_activations(self, rng):
        x = rng.standard_normal((6, 3))
        sig = nn.apply(nn.init_params(nn.MlpSpec((3, 4, 1), output_activation="sigmoid"), 0), x)
        assert ((sig > 0) & (sig < 1)).all()
        soft = nn.apply(nn.init_params(nn.MlpSpec((3, 4, 5), output_activation="softmax"), 0), x)
        assert_allclose(soft.sum(axis=1), 1.0, atol=1e-12)

    def test_logits_skip_output_activation(self, rng):
        params = nn.init_params(nn.MlpSpec((3, 4, 1), output_activation="sigmoid"), 2)
        x = rng.standard_normal((5, 3))
        assert_allclose(1 / (1 + np.exp(-nn.apply(params, x, logits=True))), nn.apply(params, x), rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            nn.apply(nn.init_params(nn.MlpSpec((3, 2)), 0), np.ones((2, 4)))

    def test_gradient_check_3_4_2(self, rng):
        params = nn.init_params(nn.MlpSpec((3, 4, 2), "tanh", "softmax"), 0)
        params.flat += 0.1 * rng.standard_normal(params.flat.size)
        x = rng.standard_normal((5, 3))
        weights = rng.standard_normal((5, 2))

        def build(tape, bound):
            return ad.reduce(nn.forward(bound[0], tape.constant(x)) * tape.constant(weights), "sum")

        assert check_param_gradients([params], build) < FD_RTOL

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(1, 8), min_size=2, max_size=4), st.integers(0, 2**31),
           st.sampled_from(["relu", "tanh"]), st.sampled_from(["linear", "sigmoid", "softmax"]))
    def test_random_small_networks(self, dims, seed, hidden, out):
        rng = np.random.default_rng(seed)
        params = nn.init_params(nn.MlpSpec(dims, hidden, out), seed)
        params.flat += 0.1 * rng.standard_normal(params.flat.size)
        x = rng.standard_normal((3, dims[0]))
        assert check_param_gradients([params], _loss_of(params, x, rng)) < FD_RTOL


class TestAdam:
    def _scalar(self, value):
        return nn.MlpParams(nn.MlpSpec((1, 1)), [np.array([[value]])], [np.zeros((1, 1))])

    def test_hand_derived_first_step(self):
        params = self._scalar(1.0)
        state = nn.AdamState.for_params(params, base_lr=1e-4, weight_decay=0.0)
        nn.adam_step(params, [np.array([[1.0]]), np.zeros((1, 1))], state)
        # m_hat = v_hat = 1 after bias correction
        assert abs(params.weights[0][0, 0] - (1.0 - 1e-4 / (1.0 + 1e-8))) <= 1e-12
        assert state.t == 1

    def test_decoupled_weight_decay(self):
        params = self._scalar(2.0)
        state = nn.AdamState.for_params(params, base_lr=1e-3, weight_decay=0.1)
        nn.adam_step(params, np.zeros(2), state)
        assert_allclose(params.weights[0][0, 0], 2.0 * (1 - 1e-3 * 0.1), rtol=1e-15)

    def test_schedule_halves_at_multiples(self):
        state = nn.AdamState.for_params(self._scalar(0.0), base_lr=1e-4, decay_every=100)
        assert all(state.lr_at(t) == 1e-4 for t in range(100))
        for k in range(1, 8):
            assert state.lr_at(100 * k) == 1e-4 * 0.5**k
            assert state.lr_at(100 * k - 1) == 1e-4 * 0.5 ** (k - 1)

    def test_zero_gradient_without_decay_is_a_no_op(self, rng):
        params = nn.init_params(nn.MlpSpec((3, 2)), 0)
        before = params.copy()
        state = nn.AdamState.for_params(params, weight_decay=0.0)
        nn.adam_step(params, np.zeros_like(params.flat), state)
        assert params.equals(before)

    def test_non_finite_gradient_leaves_state(self):
        params = self._scalar(1.0)
        state = nn.AdamState.for_params(params)
        with pytest.raises(NumericError):
            nn.adam_step(params, np.array([np.inf, 0.0]), state)
        assert params.weights[0][0, 0] == 1.0 and state.t == 0 and not state.m.any()

    def test_shape_mismatch(self):
        params = self._scalar(1.0)
        with pytest.raises(DimensionError):
            nn.adam_step(params, [np.ones((2, 1)), np.zeros((1, 1))], nn.AdamState.for_params(params))

    @given(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
    def test_descent_on_a_bowl(self, theta):
        params = self._scalar(theta)
        state = nn.AdamState.for_params(params)
        nn.adam_step(params, np.array([theta, 0.0]), state)
        assert abs(params.weights[0][0, 0]) < abs(theta)

    @given(st.integers(0, 10_000), st.integers(1, 500))
    def test_schedule_monotone_piecewise(self, t, every):
        state = nn.AdamState.for_params(self._scalar(0.0), decay_every=every)
        assert state.lr_at(t + 1) <= state.lr_at(t)
        if (t + 1) % every:
            assert state.lr_at(t + 1) == state.lr_at(t)

    def test_deterministic(self, rng):
        g = rng.standard_normal(9)
        results = []
        for _ in range(2):
            params = nn.init_params(nn.MlpSpec((2, 2, 1)), 3)
            state = nn.AdamState.for_params(params)
            for _ in range(3):
                nn.adam_step(params, g, state)
            results.append(params.flat.copy())
        assert_array_equal(results[0], results[1])


class TestCheckpoint:
    def _ckpt(self):
        a = nn.init_params(nn.MlpSpec((3, 4, 1), "relu", "sigmoid"), 0)
        b = nn.init_params(nn.MlpSpec((3, 3), "tanh", "softmax"), 1)
        opt = nn.AdamState.for_params(a, base_lr=3e-4)
        nn.adam_step(a, np.ones_like(a.flat), opt)
        return nn.Checkpoint({"D_t": a, "f_t": b}, {"D_t": opt}, {"arm": "x"})

    def test_round_trip(self, tmp_path):
        ckpt = self._ckpt()
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(path, ckpt)
        back = nn.load_checkpoint(path)
        assert back.meta == {"arm": "x"}
        for name in ckpt.networks:
            assert back.networks[name].equals(ckpt.networks[name])
        opt = back.optimizers["D_t"]
        assert opt.t == 1 and opt.base_lr == 3e-4
        assert_array_equal(opt.v, ckpt.optimizers["D_t"].v)
        assert "f_t" not in back.optimizers

    def test_magic_and_layout(self):
        raw = nn.dump_checkpoint(self._ckpt())
        assert raw.startswith(b"CCGAN1")
        payload = self._ckpt().networks["f_t"].flat.astype("<f8").tobytes()
        assert payload in raw
        assert nn.dump_checkpoint(self._ckpt()) == raw

    def test_corruption(self):
        raw = nn.dump_checkpoint(self._ckpt())
        with pytest.raises(FormatError):
            nn.load_checkpoint_bytes(b"XXXXXX" + raw[6:])
        with pytest.raises(FormatError):
            nn.load_checkpoint_bytes(raw[:-3])
        with pytest.raises(FormatError):
            nn.load_checkpoint_bytes(raw + b"\0")
