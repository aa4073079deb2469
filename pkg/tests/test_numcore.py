import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medcap.alignment import cosine_similarity, hybrid_loss
from medcap.numcore import (
    Adam,
    AdamState,
    ContractError,
    LrSchedule,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    check_gradients,
    clip_global_norm,
    concat,
    decode_tensor,
    encode_tensor,
    exp,
    gelu,
    global_norm,
    layer_norm,
    log,
    log_softmax,
    lr_at,
    matmul,
    no_grad,
    power,
    read_tensor,
    relu,
    sigmoid,
    softmax,
    sqrt,
    stack,
    tanh,
    tsum,
    where,
    write_tensor,
    zero_grad,
)
from medcap.numcore.io import TensorFormatError

F64 = np.float64


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector_selects_row():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


@pytest.mark.parametrize("shape", [(3, 4, 2), (32, 32, 32), (1, 7, 5)])
def test_matmul_matches_triple_loop(shape):
    m, k, n = shape
    rng = np.random.default_rng(m * 100 + k)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(Tensor(2.0), Tensor(np.ones((2, 2))))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([0.0, math.log(3.0)], [0.25, 0.75]),
])
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(softmax(Tensor(np.array(x, dtype=F64))).data, expected, atol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = softmax(Tensor(x)).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, s, atol=1e-9)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_sum_gradient_is_all_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 4)), requires_grad=True)
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2, 4)))


def test_hybrid_loss_gradient_matches_finite_differences_8d():
    rng = np.random.default_rng(7)
    pred, target = leaf(rng, (8,)), leaf(rng, (8,))
    res = check_gradients(lambda: hybrid_loss(pred, target, 0.7), [pred, target], h=1e-4)
    assert res.passed and res.max_rel_error < 1e-4


def test_cosine_gradient_vanishes_on_the_ray():
    y = np.array([0.3, -1.2, 0.5, 2.0])
    pred = Tensor(y.copy(), requires_grad=True)
    backward(cosine_similarity(pred, Tensor(y)))
    np.testing.assert_allclose(pred.grad, 0.0, atol=1e-12)


def test_backward_needs_a_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_needs_a_grad_path():
    with pytest.raises(ContractError):
        backward(tsum(Tensor(np.ones(3))))


def test_second_backward_accumulates_until_zero_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(tsum(x * x))
    backward(tsum(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    zero_grad([x])
    assert x.grad is None


def test_shared_subexpression_gradients_add():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward(tsum(y + y))  # d/dx 2x^2 = 4x
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


# every differentiable op against central differences, h = 1e-4, inputs in [-1, 1]
OPS = {
    "add_broadcast": (lambda a, b: tsum((a + b) * (a + b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: tsum((a - b) ** 3), [(2, 3), (2, 3)]),
    "mul_broadcast": (lambda a, b: tsum(a * b * a), [(2, 3), (2, 1)]),
    "div": (lambda a, b: tsum(a / (b * b + 1.0)), [(5,), (5,)]),
    "power": (lambda a: tsum(power(a * a + 0.5, 1.5)), [(4,)]),
    "exp": (lambda a: tsum(exp(a)), [(3, 3)]),
    "log": (lambda a: tsum(log(a * a + 0.3)), [(6,)]),
    "sqrt": (lambda a: tsum(sqrt(a * a + 0.2)), [(6,)]),
    "tanh": (lambda a: tsum(tanh(a) * a), [(6,)]),
    "sigmoid": (lambda a: tsum(sigmoid(a * 3.0)), [(6,)]),
    "relu": (lambda a: tsum(relu(a) * a), [(7,)]),
    "gelu": (lambda a: tsum(gelu(a * 2.0) * a), [(7,)]),
    "matmul": (lambda a, b: tsum(tanh(a @ b)), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: tsum(tanh(a @ b)), [(2, 3, 4), (4, 5)]),
    "matvec": (lambda a, b: tsum(tanh(a @ b)), [(3, 4), (4,)]),
    "softmax": (lambda a: tsum(softmax(a, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "log_softmax": (lambda a: tsum(log_softmax(a, axis=0) * Tensor(np.arange(12.0).reshape(3, 4))), [(3, 4)]),
    "layer_norm": (lambda a, g, b: tsum(layer_norm(a, g, b) * Tensor(np.linspace(-1, 1, 5))), [(3, 5), (5,), (5,)]),
    "mean_axis": (lambda a: tsum(a.mean(axis=1) ** 2), [(3, 4)]),
    "reshape_transpose": (lambda a: tsum(tanh(a.reshape(2, 6).transpose(1, 0)) * Tensor(np.arange(12.0).reshape(6, 2))), [(3, 4)]),
    "getitem_scatter": (lambda a: tsum(a[[0, 2, 0]] ** 2), [(3, 2)]),
    "getitem_slice": (lambda a: tsum(a[:, 1:] * a[:, :-1]), [(3, 4)]),
    "concat": (lambda a, b: tsum(tanh(concat([a, b], axis=1)) * Tensor(np.arange(10.0).reshape(2, 5))), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: tsum(stack([a, b], axis=1) ** 3), [(2, 3), (2, 3)]),
    "where": (lambda a, b: tsum(where(np.array([True, False, True]), a, b) ** 2), [(3,), (3,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    xs = [leaf(rng, s) for s in shapes]
    res = check_gradients(lambda: fn(*xs), xs, h=1e-4)
    assert res.passed, (name, res)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]))
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(2)], state, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([0.0]))
    state = AdamState.zeros_like([p])
    adam_step([p], [np.array([2.0])], state, 0.1)
    # m_hat = 2, v_hat = 4: update = 0.1 * 2 / (2 + 1e-8)
    np.testing.assert_allclose(p.data, [-0.1 * 2.0 / (2.0 + 1e-8)], rtol=0, atol=1e-15)


def test_adam_descends_quadratic_bowl():
    p = Tensor(np.array([3.0]))
    state = AdamState.zeros_like([p])
    values = [abs(p.data[0])]
    for _ in range(2):
        adam_step([p], [2.0 * p.data], state, 0.5)
        values.append(abs(p.data[0]))
    assert values[0] > values[1] > values[2]


def test_adam_rejects_bad_inputs():
    p = Tensor(np.zeros(2))
    state = AdamState.zeros_like([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], state, 0.1)
    with pytest.raises(ContractError):
        adam_step([p], [np.zeros(2)], state, -1.0)


def test_adam_groups_skip_frozen_and_use_group_rates():
    a = Tensor(np.zeros(1), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    c = Tensor(np.zeros(1), requires_grad=False)
    opt = Adam({"fast": {"a": a}, "slow": {"b": b, "c": c}})
    for t in (a, b, c):
        t.grad = np.array([1.0])
    opt.step({"fast": 0.1, "slow": 0.01})
    np.testing.assert_allclose([a.data[0], b.data[0], c.data[0]], [-0.1, -0.01, 0.0], rtol=1e-6)
    assert set(opt.states) == {"a", "b"}


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_examples():
    s = LrSchedule(1.0, 100, 1000)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 50) == pytest.approx(0.5, abs=1e-15)
    assert lr_at(s, 1000) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(s, 100) == 1.0


def test_lr_continuous_at_boundary():
    s = LrSchedule(3e-4, 10, 200)
    assert lr_at(s, 10) == pytest.approx(3e-4)
    assert abs(lr_at(s, 9) - 3e-4) < 3e-4 / 10 + 1e-18
    assert abs(lr_at(s, 11) - 3e-4) < 1e-6


def test_lr_out_of_range_and_bad_schedules():
    s = LrSchedule(1.0, 0, 10)
    with pytest.raises(ContractError):
        lr_at(s, 11)
    with pytest.raises(ContractError):
        lr_at(s, -1)
    with pytest.raises(ContractError):
        LrSchedule(1.0, 11, 10)
    with pytest.raises(ContractError):
        LrSchedule(0.0, 0, 10)


def test_warmup_fraction_is_five_percent():
    assert LrSchedule.with_warmup_fraction(1.0, 200).warmup_steps == 10


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 500), st.floats(0, 1), st.data())
def test_lr_nonnegative_and_bounded(total, frac, data):
    s = LrSchedule(2.0, int(frac * total), total)
    step = data.draw(st.integers(0, total))
    assert 0.0 <= lr_at(s, step) <= 2.0


# ---------------------------------------------------------------------------
# gradient clipping
# ---------------------------------------------------------------------------

def test_clip_under_threshold_is_unchanged():
    g = [np.array([0.3, 0.4])]
    out, norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(out[0], g[0])


def test_clip_single():
    out, norm = clip_global_norm([np.array([2.0, 0.0])], 1.0)
    assert norm == 2.0
    np.testing.assert_allclose(out[0], [1.0, 0.0])


def test_clip_joint_norm_four():
    grads = [np.full(4, 1.0), np.full((2, 2), 1.0), np.array([2.0 * math.sqrt(2.0)])]
    out, norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(4.0)
    for g, o in zip(grads, out):
        np.testing.assert_allclose(o, g * 0.25)


def test_clip_rejects_nonpositive_max():
    with pytest.raises(ContractError):
        clip_global_norm([np.ones(2)], 0.0)


@settings(max_examples=80, deadline=None)
@given(st.lists(arrays(np.float32, st.integers(1, 6), elements=st.floats(-1e3, 1e3, width=32)), min_size=1, max_size=4),
       st.floats(0.01, 10))
def test_clip_never_increases_norm_and_respects_max(grads, max_norm):
    out, before = clip_global_norm(grads, max_norm)
    after = global_norm(out)
    assert after <= before + 1e-9
    assert after <= max_norm + 1e-9


# ---------------------------------------------------------------------------
# raw tensor files
# ---------------------------------------------------------------------------

def test_tensor_file_header_and_payload(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = encode_tensor(arr)
    header, payload = blob.split(b"\n", 1)
    assert header == b'{"dtype":"f32","shape":[2,3]}'
    assert payload == arr.astype("<f4").tobytes()
    write_tensor(tmp_path / "x.bin", arr)
    np.testing.assert_array_equal(read_tensor(tmp_path / "x.bin"), arr)


def test_tensor_file_f64_round_trip():
    arr = np.random.default_rng(0).normal(size=(3, 1, 2))
    out = decode_tensor(encode_tensor(arr, "f64"))
    assert out.dtype == np.float64
    np.testing.assert_array_equal(out, arr)


@pytest.mark.parametrize("blob", [b"no header", b'{"dtype":"f32","shape":[2]}\n\x00\x00', b'{"dtype":"i8","shape":[]}\n'])
def test_tensor_file_rejects_malformed(blob):
    with pytest.raises(TensorFormatError):
        decode_tensor(blob)
