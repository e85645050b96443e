import numpy as np
import pytest

from ztfed.model import (
    AdamState,
    Mas2sConfig,
    SeqBatch,
    adam_update,
    backward,
    bilstm_encode,
    decoder_step,
    forward,
    from_model_params,
    impute,
    init_params,
    load_checkpoint,
    lstm_cell,
    mae_loss,
    multi_head_attention,
    param_count,
    save_checkpoint,
    to_model_params,
    train_local,
)

TINY = Mas2sConfig(input_features=3, hidden_size=8, heads=2, key_dim=4, sequence_length=6)


def tiny_params(seed=0, random_biases=True):
    rng = np.random.default_rng(seed)
    params = init_params(TINY, rng)
    if random_biases:
        for k in params:
            if params[k].ndim == 1:
                params[k] = rng.uniform(-0.3, 0.3, size=params[k].shape)
    return params


def tiny_batch(seed=0, batch=2):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(batch, TINY.sequence_length, TINY.input_features))
    y = rng.uniform(0, 1, size=(batch, TINY.sequence_length))
    return x, y


def zero_weights(in_dim, hidden):
    names = ("W_f", "W_i", "W_o", "W_c")
    w = {n: np.zeros((hidden, in_dim)) for n in names}
    w.update({n.replace("W", "b"): np.zeros(hidden) for n in names})
    return w


class TestLstmCell:
    def test_zero_weights_zero_cell(self):
        w = zero_weights(5, 3)
        h, c = lstm_cell(np.zeros(2), np.zeros(3), np.zeros(3), w)
        # gates are 0.5 at zero pre-activation, candidate tanh(0)=0
        assert np.allclose(c, 0.0)
        assert np.allclose(h, 0.0)

    def test_zero_weights_carries_half_cell(self):
        w = zero_weights(5, 3)
        c_prev = np.array([0.4, -1.0, 2.0])
        h, c = lstm_cell(np.zeros(2), np.zeros(3), c_prev, w)
        assert np.allclose(c, 0.5 * c_prev)
        assert np.allclose(h, 0.5 * np.tanh(0.5 * c_prev))

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(1)
        w = {k: rng.normal(scale=3.0, size=v.shape) for k, v in zero_weights(7, 4).items()}
        h, _ = lstm_cell(rng.normal(size=3) * 10, rng.normal(size=4), rng.normal(size=4) * 10, w)
        assert np.all(np.abs(h) < 1.0)


class TestEncoder:
    def test_output_width(self):
        params = tiny_params()
        x = np.zeros((1, TINY.sequence_length, 3))
        h = bilstm_encode(x, params, TINY)
        assert h.shape == (1, TINY.sequence_length, 16)

    def test_length_one_sequence(self):
        params = tiny_params()
        h = bilstm_encode(np.zeros((1, 1, 3)), params, TINY)
        assert h.shape == (1, 1, 16)

    def test_reversal_swaps_directions(self):
        params = tiny_params(seed=2)
        swapped = dict(params)
        for g in ("f", "i", "o", "c"):
            swapped[f"enc_fwd.W_{g}"] = params[f"enc_bwd.W_{g}"]
            swapped[f"enc_fwd.b_{g}"] = params[f"enc_bwd.b_{g}"]
            swapped[f"enc_bwd.W_{g}"] = params[f"enc_fwd.W_{g}"]
            swapped[f"enc_bwd.b_{g}"] = params[f"enc_fwd.b_{g}"]
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 5, 3))
        h = bilstm_encode(x, params, TINY)
        h_rev = bilstm_encode(x[:, ::-1, :], swapped, TINY)
        # forward states of the reversed input equal reversed backward states
        assert np.allclose(h_rev[:, :, :8], h[:, ::-1, 8:])
        assert np.allclose(h_rev[:, :, 8:], h[:, ::-1, :8])

    def test_deterministic(self):
        params = tiny_params(seed=4)
        x, _ = tiny_batch(seed=4)
        assert np.array_equal(bilstm_encode(x, params, TINY), bilstm_encode(x, params, TINY))


class TestAttention:
    def test_identical_hidden_states_uniform_weights(self):
        params = tiny_params(seed=5)
        h_seq = np.tile(np.random.default_rng(5).normal(size=(1, 1, 16)), (1, 6, 1))
        _, alphas = multi_head_attention(np.zeros((1, 8)), h_seq, params, TINY)
        for alpha in alphas:
            assert np.allclose(alpha, 1.0 / 6)

    def test_single_step_weight_is_one(self):
        params = tiny_params(seed=6)
        h_seq = np.random.default_rng(6).normal(size=(1, 1, 16))
        _, alphas = multi_head_attention(np.zeros((1, 8)), h_seq, params, TINY)
        for alpha in alphas:
            assert np.allclose(alpha, 1.0)

    def test_weights_are_distributions(self):
        params = tiny_params(seed=7)
        rng = np.random.default_rng(7)
        h_seq = rng.normal(size=(3, 6, 16))
        s = rng.normal(size=(3, 8))
        _, alphas = multi_head_attention(s, h_seq, params, TINY)
        for alpha in alphas:
            assert np.all(alpha >= 0)
            assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-9)


class TestDecoderStep:
    def test_zero_weights_outputs_bias(self):
        params = {k: np.zeros_like(v) for k, v in tiny_params().items()}
        params["out.b_d"] = np.array([0.37])
        _, y, _ = decoder_step(np.zeros(8), np.zeros(8), np.zeros(8), params)
        assert y == pytest.approx(0.37)

    def test_deterministic(self):
        params = tiny_params(seed=8)
        rng = np.random.default_rng(8)
        c, s, cell = rng.normal(size=8), rng.normal(size=8), rng.normal(size=8)
        out1 = decoder_step(c, s, cell, params)
        out2 = decoder_step(c, s, cell, params)
        assert all(np.allclose(a, b) for a, b in zip(out1, out2))


class TestForward:
    def test_output_shape_matches_sequence(self):
        params = tiny_params()
        x, _ = tiny_batch(batch=3)
        y_hat, _ = forward(x, params, TINY)
        assert y_hat.shape == (3, TINY.sequence_length)

    def test_identical_rows_identical_outputs(self):
        params = tiny_params(seed=9)
        x, _ = tiny_batch(seed=9, batch=1)
        xx = np.concatenate([x, x])
        y_hat, _ = forward(xx, params, TINY)
        assert np.allclose(y_hat[0], y_hat[1])

    def test_finite_outputs(self):
        params = tiny_params(seed=10)
        x, _ = tiny_batch(seed=10)
        y_hat, _ = forward(x, params, TINY)
        assert np.isfinite(y_hat).all()

    def test_batch_order_independence(self):
        params = tiny_params(seed=11)
        x, _ = tiny_batch(seed=11, batch=4)
        y_hat, _ = forward(x, params, TINY)
        y_perm, _ = forward(x[::-1], params, TINY)
        assert np.allclose(y_hat[::-1], y_perm)

    def test_matches_op_composition(self):
        # full forward equals the step-by-step composition of the public ops
        params = tiny_params(seed=12)
        rng = np.random.default_rng(12)
        x = rng.uniform(-1, 1, size=(1, 4, 3))
        cfg = Mas2sConfig(input_features=3, hidden_size=8, heads=2, key_dim=4, sequence_length=4)
        y_hat, _ = forward(x, params, cfg)
        h_seq = bilstm_encode(x, params, cfg)
        s = np.zeros((1, 8))
        cell = np.zeros((1, 8))
        for t in range(4):
            ctx, _ = multi_head_attention(s, h_seq, params, cfg)
            s, y_t, cell = decoder_step(ctx, s, cell, params)
            assert y_t[0] == pytest.approx(y_hat[0, t])

    def test_wrong_feature_count_rejected(self):
        with pytest.raises(ValueError):
            forward(np.zeros((1, 6, 5)), tiny_params(), TINY)

    def test_hidden_states_bounded(self):
        params = tiny_params(seed=13)
        x, _ = tiny_batch(seed=13)
        h = bilstm_encode(x, params, TINY)
        assert np.all(np.abs(h) < 1.0)


class TestLoss:
    def test_perfect_fit(self):
        y = np.array([[1.0, 2.0]])
        assert mae_loss(y, y) == 0.0

    def test_hand_value(self):
        assert mae_loss(np.array([[1.0, 3.0]]), np.array([[1.0, 2.0]])) == pytest.approx(0.5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(14)
        y_hat = rng.normal(size=(2, 6))
        y = rng.normal(size=(2, 6))
        perm = rng.permutation(6)
        assert mae_loss(y_hat, y) == pytest.approx(mae_loss(y_hat[:, perm], y[:, perm]))


def max_relative_grad_error(params, x, y, cfg, eps=1e-5):
    _, cache = forward(x, params, cfg)
    grads = backward(cache, y)
    worst = 0.0
    for name in params:
        flat = params[name].ravel()
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            saved = flat[i]
            work = {k: v.copy() for k, v in params.items()}
            work[name].ravel()[i] = saved + eps
            up = mae_loss(forward(x, work, cfg)[0], y)
            work[name].ravel()[i] = saved - eps
            down = mae_loss(forward(x, work, cfg)[0], y)
            fd[i] = (up - down) / (2 * eps)
        g = grads[name].ravel()
        rel = np.abs(g - fd) / np.maximum.reduce([np.abs(g), np.abs(fd), np.full(g.shape, 1e-6)])
        worst = max(worst, float(rel.max()))
    return worst


class TestBackward:
    def test_gradcheck_single_seed(self):
        params = tiny_params(seed=0)
        x, y = tiny_batch(seed=0)
        assert max_relative_grad_error(params, x, y, TINY) <= 1e-4

    def test_zero_loss_zero_gradient(self):
        params = tiny_params(seed=15)
        x, _ = tiny_batch(seed=15)
        y_hat, cache = forward(x, params, TINY)
        grads = backward(cache, y_hat)  # targets equal outputs: at the |.| kink
        assert all(not g.any() for g in grads.values())

    def test_dead_parameter_zero_gradient(self):
        # append an output row never produced: its W_d column stays untouched
        params = tiny_params(seed=16)
        x, y = tiny_batch(seed=16)
        _, cache = forward(x, params, TINY)
        grads = backward(cache, y)
        # b_d is live; every encoder bias participates; check an unused pad instead:
        padded = dict(params)
        padded["pad.dead"] = np.zeros((3, 3))
        # gradients dict is defined by the layer map: a foreign key must not appear
        assert "pad.dead" not in grads


class TestAdam:
    def test_zero_gradient_no_change(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.zeros(2)}
        state = AdamState(learning_rate=0.1)
        new_params, new_state = adam_update(params, grads, state)
        assert np.array_equal(new_params["w"], params["w"])
        assert new_state.step == 1

    def test_first_step_magnitude(self):
        # with g=1 the bias-corrected first step is ~lr (up to eps)
        params = {"w": np.array([0.0])}
        grads = {"w": np.array([1.0])}
        new_params, _ = adam_update(params, grads, AdamState(learning_rate=0.01))
        assert new_params["w"][0] == pytest.approx(-0.01, rel=1e-4)

    def test_trajectory_determinism(self):
        def run():
            params = tiny_params(seed=17)
            state = AdamState(learning_rate=0.01)
            x, y = tiny_batch(seed=17)
            for _ in range(5):
                _, cache = forward(x, params, TINY)
                params, state = adam_update(params, backward(cache, y), state)
            return params
        a, b = run(), run()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestTrainLocal:
    def batch(self, n=20, seed=18):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, size=(n, TINY.sequence_length, TINY.input_features))
        x[:, :, -1] = (x[:, :, -1] > 0.8).astype(float)
        # learnable mapping plus a per-sample component to memorize
        y = 0.7 * x[:, :, 0] + 0.2 * x[:, :, 1] + 0.05 * rng.normal(size=(n, TINY.sequence_length))
        return SeqBatch(inputs=x, targets=y)

    def test_zero_epochs_identity(self):
        params = tiny_params(seed=19)
        out, _, trace = train_local(self.batch(), params, 0, AdamState(), TINY, np.random.default_rng(0))
        assert trace == []
        assert all(np.array_equal(out[k], params[k]) for k in params)

    def test_trace_length(self):
        _, _, trace = train_local(
            self.batch(), tiny_params(seed=20), 3, AdamState(), TINY, np.random.default_rng(0)
        )
        assert len(trace) == 3

    def test_memorization_smoke(self):
        # loss on a 20-sample task shrinks by at least half after 50 epochs
        batch = self.batch()
        params = tiny_params(seed=21, random_biases=False)
        state = AdamState(learning_rate=0.01)
        params, _, trace = train_local(batch, params, 50, state, TINY, np.random.default_rng(1))
        assert trace[-1] <= 0.5 * trace[0]


class TestImpute:
    def masked_inputs(self, mask_value):
        rng = np.random.default_rng(22)
        x = rng.uniform(0, 1, size=(1, TINY.sequence_length, TINY.input_features))
        x[:, :, -1] = mask_value
        return x

    def test_fully_observed_returns_observations(self):
        x = self.masked_inputs(0.0)
        out = impute(x, tiny_params(seed=23), TINY)
        assert np.array_equal(out, x[:, :, 0])

    def test_fully_missing_is_model_output(self):
        x = self.masked_inputs(1.0)
        params = tiny_params(seed=24)
        out = impute(x, params, TINY)
        y_hat, _ = forward(x, params, TINY)
        assert np.array_equal(out, y_hat)

    def test_shape_preserved(self):
        x = self.masked_inputs(0.0)
        assert impute(x, tiny_params(), TINY).shape == (1, TINY.sequence_length)


class TestParamPlumbing:
    def test_count_formula(self):
        for cfg in (TINY, Mas2sConfig(input_features=7, hidden_size=16, heads=2, key_dim=8)):
            params = init_params(cfg, np.random.default_rng(0))
            assert sum(v.size for v in params.values()) == param_count(cfg)

    def test_model_params_round_trip(self):
        params = tiny_params(seed=25)
        mp = to_model_params(params, TINY)
        back = from_model_params(mp)
        assert set(back) == set(params)
        assert all(np.array_equal(back[k], params[k]) for k in params)

    def test_checkpoint_round_trip(self, tmp_path):
        params = tiny_params(seed=26)
        mp = to_model_params(params, TINY)
        save_checkpoint(tmp_path / "m.ckpt", mp, TINY)
        loaded, cfg = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg == TINY
        # float32 canonical round trip
        for (s1, a1), (s2, a2) in zip(mp.layers, loaded.layers):
            assert s1 == s2
            assert np.allclose(a1, a2, atol=1e-6)


class TestSeqBatch:
    def test_mask_channel_validated(self):
        x = np.zeros((1, 4, 3))
        x[0, 0, -1] = 0.5
        with pytest.raises(ValueError):
            SeqBatch(inputs=x, targets=np.zeros((1, 4)))

    def test_shape_validated(self):
        with pytest.raises(ValueError):
            SeqBatch(inputs=np.zeros((1, 4, 3)), targets=np.zeros((1, 5)))
