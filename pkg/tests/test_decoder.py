import numpy as np
import pytest

from medcap.alignment import hybrid_loss
from medcap.decoder import FULL_DECODER, Decoder, DecoderConfig, DecoderState, LSTMLayer
from medcap.numcore import ShapeError, Tensor, check_gradients, no_grad

F64 = np.float64


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_oracle(x, h, c, W, b):
    """Textbook LSTM cell; W[g] maps [x, h] to gate g."""
    xh = np.concatenate([x, h])
    i = sigmoid(xh @ W["i"] + b["i"])
    f = sigmoid(xh @ W["f"] + b["f"])
    g = np.tanh(xh @ W["g"] + b["g"])
    o = sigmoid(xh @ W["o"] + b["o"])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_cell_matches_hand_coded_oracle():
    rng = np.random.default_rng(0)
    layer = LSTMLayer(4, 4, rng, dtype=F64)
    W = {g: getattr(layer, f"w_{g}").data for g in "ifgo"}
    b = {g: getattr(layer, f"b_{g}").data for g in "ifgo"}
    x, h, c = rng.normal(size=4), rng.uniform(-1, 1, 4), rng.normal(size=4)
    h2, c2 = layer(Tensor(x[None]), Tensor(h[None]), Tensor(c[None]))
    eh, ec = lstm_oracle(x, h, c, W, b)
    np.testing.assert_allclose(h2.data[0], eh, rtol=0, atol=1e-10)
    np.testing.assert_allclose(c2.data[0], ec, rtol=0, atol=1e-10)


def test_forget_bias_starts_at_one():
    layer = LSTMLayer(3, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(layer.b_f.data, np.ones(5))
    bound = 1 / np.sqrt(5)
    assert np.abs(layer.w_i.data).max() <= bound


def test_zero_parameters_and_state_give_zero_output():
    dec = Decoder(DecoderConfig(4, 4, 2, 0.0, 3), np.random.default_rng(0), dtype=F64)
    for p in dec.parameters():
        p.data = np.zeros_like(p.data)
    state = DecoderState([Tensor(np.zeros((1, 4)))] * 2, [Tensor(np.zeros((1, 4)))] * 2)
    y, _ = dec.step(Tensor(np.random.default_rng(1).normal(size=(1, 4))), state)
    np.testing.assert_array_equal(y.data, 0.0)


def test_zero_image_gives_zero_state_on_an_unfitted_decoder():
    dec = Decoder(DecoderConfig(6, 6, 2, 0.1, 5), np.random.default_rng(0))
    state = dec.init_state(Tensor(np.zeros((1, 5), dtype=np.float32)))
    for t in state.h + state.c:
        np.testing.assert_array_equal(t.data, 0.0)
    assert len(state.h) == len(state.c) == 2
    assert state.h[0] is state.h[1]


def test_distinct_images_give_distinct_states():
    dec = Decoder(DecoderConfig(6, 6, 2, 0.1, 5), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    s1 = dec.init_state(Tensor(rng.normal(size=(1, 5)).astype(np.float32)))
    s2 = dec.init_state(Tensor(rng.normal(size=(1, 5)).astype(np.float32)))
    assert not np.allclose(s1.h[0].data, s2.h[0].data)
    assert not np.allclose(s1.c[0].data, s2.c[0].data)


def test_init_state_width_check():
    dec = Decoder(DecoderConfig(6, 6, 2, 0.1, 5))
    with pytest.raises(ShapeError):
        dec.init_state(Tensor(np.zeros((1, 4))))
    with pytest.raises(ShapeError):
        dec.step(Tensor(np.zeros((1, 5))), dec.init_state(Tensor(np.ones((1, 5)))))


def test_full_size_decoder_geometry_and_bounded_hidden_state():
    assert (FULL_DECODER.num_layers, FULL_DECODER.hidden_size, FULL_DECODER.input_size) == (2, 768, 768)
    dec = Decoder(FULL_DECODER, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    with no_grad():
        state = dec.init_state(Tensor(rng.normal(scale=5.0, size=(2, 384)).astype(np.float32)))
        assert all(h.shape == (2, 768) for h in state.h + state.c)
        for _ in range(3):
            y, state = dec.step(Tensor(rng.normal(scale=10.0, size=(2, 768)).astype(np.float32)), state)
            for h in state.h:
                assert np.all(np.abs(h.data) < 1.0)
        assert dec.project(y).shape == (2, 768)


def test_identity_projection():
    dec = Decoder(DecoderConfig(4, 4, 2, 0.0, 3), np.random.default_rng(0), dtype=F64)
    dec.proj.w.data = np.eye(4)
    dec.proj.b.data = np.zeros(4)
    y = Tensor(np.random.default_rng(1).normal(size=(2, 4)))
    np.testing.assert_array_equal(dec.project(y).data, y.data)


def test_projection_gradient():
    rng = np.random.default_rng(2)
    dec = Decoder(DecoderConfig(5, 5, 2, 0.0, 3), rng, dtype=F64)
    y = Tensor(rng.uniform(-1, 1, (3, 5)))
    target = rng.normal(size=(3, 5))
    res = check_gradients(lambda: hybrid_loss(dec.project(y), target), [dec.proj.w, dec.proj.b])
    assert res.passed


def test_dropout_only_in_training_and_only_between_layers():
    dec = Decoder(DecoderConfig(4, 4, 2, 0.5, 3), np.random.default_rng(0), dtype=F64)
    state = dec.init_state(Tensor(np.ones((1, 3))))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
    y1, s1 = dec.step(x, state)
    y2, _ = dec.step(x, state)
    assert np.array_equal(y1.data, y2.data)
    yt, st = dec.step(x, state, training=True, rng=np.random.default_rng(3))
    # layer 1 state is never dropped, only what layer 2 sees
    np.testing.assert_array_equal(st.h[0].data, s1.h[0].data)
    assert not np.allclose(yt.data, y1.data)
    with pytest.raises(ValueError):
        dec.step(x, state, training=True)


def test_teacher_forcing_runs_one_step_per_position():
    dec = Decoder(DecoderConfig(4, 4, 2, 0.0, 3), np.random.default_rng(0))
    inputs = Tensor(np.random.default_rng(1).normal(size=(2, 7, 4)).astype(np.float32))
    outs = dec.teacher_forced(inputs, dec.init_state(Tensor(np.ones((2, 3), np.float32))))
    assert len(outs) == 7 and all(o.shape == (2, 4) for o in outs)
    # last output equals a manual unroll
    state = dec.init_state(Tensor(np.ones((2, 3), np.float32)))
    for t in range(7):
        y, state = dec.step(inputs[:, t], state)
    np.testing.assert_array_equal(dec.project(y).data, outs[-1].data)


def test_checkpoint_names_number_layers_from_one():
    names = Decoder().named_parameters("decoder.")
    assert "decoder.lstm.l1.w_f" in names and "decoder.lstm.l2.w_f" in names
    assert "decoder.lstm.0.w_f" not in names
    assert {"decoder.init_h.w", "decoder.init_c.b", "decoder.proj.w"} <= set(names)


def test_condition_standardization_and_buffers():
    dec = Decoder(DecoderConfig(4, 4, 2, 0.0, 3), np.random.default_rng(0), dtype=F64)
    emb = np.random.default_rng(1).normal(loc=5.0, scale=0.01, size=(50, 3))
    dec.fit_condition(emb)
    z = (emb - dec.cond_mean) * dec.cond_scale
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-3)
    other = Decoder(DecoderConfig(4, 4, 2, 0.0, 3), np.random.default_rng(0), dtype=F64)
    other.load_buffers(dec.named_buffers("d."), "d.")
    np.testing.assert_array_equal(other.cond_scale, dec.cond_scale)
    with pytest.raises(KeyError):
        other.load_buffers({}, "d.")
    with pytest.raises(ValueError):
        other.load_buffers({"cond_mean": np.zeros(2), "cond_scale": np.ones(3)})
    with pytest.raises(ShapeError):
        dec.fit_condition(np.zeros((4, 2)))
