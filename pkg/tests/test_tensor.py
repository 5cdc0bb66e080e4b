import numpy as np
import pytest
from scipy import signal

from memseg import tensor as T
from gradcheck import check_grads, rel_error, numeric_grads


def rng_for(name, salt=0):
    return np.random.default_rng(abs(hash((name, salt))) % (2**32))


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = T.tensor([[1, 0], [0, 1]])
    b = T.tensor([[3, 4], [5, 6]])
    assert np.array_equal(T.matmul(a, b).data, [[3, 4], [5, 6]])


def test_matmul_hand():
    out = T.matmul(T.tensor([[1, 2]]), T.tensor([[3], [4]]))
    assert np.array_equal(out.data, [[11]])


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))


def test_matmul_sum_grad_is_ones_times_bT():
    rng = np.random.default_rng(11)
    a = T.tensor(rng.standard_normal((4, 5)), requires_grad=True)
    b = T.tensor(rng.standard_normal((5, 3)), requires_grad=True)
    with T.Tape() as tape:
        out = T.sum_(T.matmul(a, b))
    tape.backward(out)
    expected = np.ones((4, 3), dtype=np.float32) @ b.data.T
    assert rel_error(a.grad, expected) < 1e-6


def test_matmul_gradcheck():
    check_grads(T.matmul, [(4, 5), (5, 3)], rng_for("matmul"))


def test_bmm_gradcheck():
    check_grads(T.bmm, [(3, 2, 4), (3, 4, 2)], rng_for("bmm"), trials=50)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    out = T.softmax(T.tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_stabilized():
    out = T.softmax(T.tensor([1000.0, 0.0]), axis=0)
    assert out.data[0] == pytest.approx(1.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = T.softmax(T.tensor(rng.standard_normal((5, 7))), axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), rtol=1e-5)
    assert (out.data > 0).all() and (out.data < 1).all()


def test_softmax_gradcheck():
    check_grads(lambda x: T.softmax(x, axis=0), [(6,)], rng_for("softmax"))


def test_log_softmax_gradcheck():
    check_grads(lambda x: T.log_softmax(x, axis=-1), [(4, 6)], rng_for("logsoftmax"), trials=50)


# ---------------------------------------------------------------- conv2d

def test_conv2d_unit_kernel_identity():
    x = T.tensor(np.arange(9, dtype=np.float32).reshape(1, 3, 3))
    k = T.tensor(np.ones((1, 1, 1, 1)))
    assert np.array_equal(T.conv2d(x, k).data, x.data)


def test_conv2d_ones_counts():
    x = T.tensor(np.ones((1, 3, 3)))
    k = T.tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k).data[0]
    assert out[1, 1] == 9
    assert out[0, 0] == 4
    assert out[0, 1] == 6


def test_conv2d_even_kernel_rejected():
    with pytest.raises(T.ConfigError):
        T.conv2d(T.tensor(np.zeros((1, 4, 4))), T.tensor(np.zeros((1, 1, 2, 2))))


def test_conv2d_matches_scipy():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6, 7)).astype(np.float32)
    k = rng.standard_normal((3, 2, 3, 5)).astype(np.float32)
    out = T.conv2d(T.tensor(x), T.tensor(k)).data
    for o in range(3):
        ref = sum(
            signal.correlate(x[i].astype(np.float64), k[o, i].astype(np.float64), mode="same")
            for i in range(2)
        )
        np.testing.assert_allclose(out[o], ref, rtol=1e-4, atol=1e-5)


def test_conv2d_gradcheck():
    check_grads(T.conv2d, [(2, 5, 5), (3, 2, 3, 3)], rng_for("conv2d"), trials=30)


def test_conv2d_bias_gradcheck():
    check_grads(T.conv2d, [(2, 4, 4), (3, 2, 3, 3), (3,)], rng_for("conv2d_bias"), trials=20)


# ---------------------------------------------------------------- conv3d

def test_conv3d_unit_kernel_identity():
    x = T.tensor(np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4))
    k = T.tensor(np.ones((1, 1, 1, 1, 1)))
    assert np.array_equal(T.conv3d(x, k).data, x.data)


def test_conv3d_ones_center_count():
    x = T.tensor(np.ones((1, 3, 3, 3)))
    k = T.tensor(np.ones((1, 1, 3, 3, 3)))
    out = T.conv3d(x, k).data[0]
    assert out[1, 1, 1] == 27
    assert out[0, 0, 0] == 8


def test_conv3d_matches_scipy():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    k = rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
    out = T.conv3d(T.tensor(x), T.tensor(k)).data
    for o in range(2):
        ref = sum(
            signal.correlate(x[i].astype(np.float64), k[o, i].astype(np.float64), mode="same")
            for i in range(2)
        )
        np.testing.assert_allclose(out[o], ref, rtol=1e-4, atol=1e-5)


def test_conv3d_gradcheck():
    check_grads(T.conv3d, [(2, 3, 4, 4), (2, 2, 3, 3, 3)], rng_for("conv3d"), trials=10)


# ---------------------------------------------------------------- attention

def test_attention_single_key_returns_value_row():
    rng = np.random.default_rng(7)
    q = T.tensor(rng.standard_normal((3, 4)))
    k = T.tensor(rng.standard_normal((1, 4)))
    v = T.tensor(rng.standard_normal((1, 2)))
    out = T.attention(q, k, v)
    for row in out.data:
        np.testing.assert_allclose(row, v.data[0], rtol=1e-6)


def test_attention_orthonormal_oracle():
    # q == k with orthonormal rows, v = identity: output rows are the
    # softmax weights themselves, computed here by direct evaluation.
    n, d = 4, 4
    q = np.eye(n, d, dtype=np.float32)
    out = T.attention(T.tensor(q), T.tensor(q), T.tensor(np.eye(n, dtype=np.float32)))
    scores = (q @ q.T) / np.sqrt(d)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    expected = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data, expected, rtol=1e-5)
    assert all(out.data[i].argmax() == i for i in range(n))


def test_attention_empty_keys_rejected():
    with pytest.raises(T.ConfigError):
        T.attention(T.tensor(np.zeros((2, 4))), T.tensor(np.zeros((0, 4))), T.tensor(np.zeros((0, 3))))


def test_attention_gradcheck():
    check_grads(T.attention, [(3, 4), (5, 4), (5, 2)], rng_for("attention"))


def test_battention_gradcheck():
    check_grads(T.battention, [(2, 3, 4), (2, 5, 4), (2, 5, 3)], rng_for("battention"), trials=30)


# ---------------------------------------------------------------- resize

def test_resize_same_size_passthrough():
    rng = np.random.default_rng(8)
    x = T.tensor(rng.standard_normal((2, 5, 6)))
    out = T.resize_bilinear(x, 5, 6)
    assert np.array_equal(out.data, x.data)


def test_resize_1x1_constant_fill():
    out = T.resize_bilinear(T.tensor([[[3.5]]]), 4, 4)
    assert np.array_equal(out.data, np.full((1, 4, 4), 3.5, dtype=np.float32))


def test_resize_checkerboard_hand_values():
    # Hand-derived align-corners-false weights for 2 -> 4:
    # rows sample at -0.25, 0.25, 0.75, 1.25 (clamped).
    r = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]], dtype=np.float32)
    x = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    expected = r @ x @ r.T
    out = T.resize_bilinear(T.tensor(x[None]), 4, 4)
    np.testing.assert_allclose(out.data[0], expected, rtol=1e-6)


def test_resize_gradcheck():
    check_grads(lambda x: T.resize_bilinear(x, 5, 7), [(2, 3, 4)], rng_for("resize"), trials=50)
    check_grads(lambda x: T.resize_bilinear(x, 2, 2), [(1, 5, 5)], rng_for("resize", 1), trials=50)


# ---------------------------------------------------------------- plumbing ops

def test_add_mul_scalar_broadcast_only():
    a = T.tensor(np.ones((2, 3)))
    with pytest.raises(T.ShapeError):
        T.add(a, T.tensor(np.ones((3,))))
    out = T.add(a, T.tensor(4.0))
    assert np.array_equal(out.data, np.full((2, 3), 5, dtype=np.float32))


def test_elementwise_gradchecks():
    rng = rng_for("elementwise")
    check_grads(T.add, [(3, 4), (3, 4)], rng, trials=25)
    check_grads(T.sub, [(3, 4), (3, 4)], rng, trials=25)
    check_grads(T.mul, [(3, 4), (3, 4)], rng, trials=25)
    check_grads(lambda a: T.mul(a, 2.5), [(3, 4)], rng, trials=25)
    check_grads(T.div, [(3, 4), (3, 4)], rng, trials=25, margin=0.2)
    check_grads(T.neg, [(5,)], rng, trials=25)


def test_relu_gradcheck():
    check_grads(T.relu, [(4, 5)], rng_for("relu"), margin=0.05)


def test_sigmoid_gradcheck():
    check_grads(T.sigmoid, [(4, 5)], rng_for("sigmoid"))


def test_reduction_gradchecks():
    rng = rng_for("reduce")
    check_grads(T.sum_, [(3, 4)], rng, trials=25)
    check_grads(lambda x: T.sum_(x, axis=1), [(3, 4)], rng, trials=25)
    check_grads(T.mean, [(3, 4)], rng, trials=25)
    check_grads(lambda x: T.mean(x, axis=0), [(3, 4)], rng, trials=25)


def test_reshape_transpose_gradchecks():
    rng = rng_for("reshape")
    check_grads(lambda x: T.reshape(x, 6, 2), [(3, 4)], rng, trials=25)
    check_grads(lambda x: T.transpose(x, (1, 0)), [(3, 4)], rng, trials=25)
    check_grads(lambda x: T.transpose(x, (2, 0, 1)), [(2, 3, 4)], rng, trials=25)


def test_concat_select_gradchecks():
    rng = rng_for("concat")
    check_grads(lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], rng, trials=25)
    check_grads(lambda x: T.select(x, 0, 1), [(3, 4)], rng, trials=25)


def test_gather_gradchecks():
    rng = rng_for("gather")
    idx = np.array([0, 2, 2, 1])
    check_grads(lambda t: T.take_rows(t, idx), [(3, 4)], rng, trials=25)
    cols = np.array([1, 0, 3])
    check_grads(lambda x: T.pick(x, cols), [(3, 4)], rng, trials=25)


def test_take_along_gradcheck():
    rng = rng_for("take_along")
    idx = rng.integers(0, 3, size=(2, 1, 4))
    check_grads(lambda x: T.take_along(x, idx, axis=1), [(2, 3, 4)], rng, trials=25)


def test_layer_norm_gradcheck():
    check_grads(T.layer_norm, [(3, 6)], rng_for("layernorm"))


def test_layer_norm_normalizes():
    rng = np.random.default_rng(9)
    out = T.layer_norm(T.tensor(rng.standard_normal((4, 8)) * 3 + 2)).data
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-5)
    np.testing.assert_allclose(out.std(axis=-1), np.ones(4), atol=1e-2)


def test_avg_pool2_gradcheck():
    check_grads(T.avg_pool2, [(2, 4, 6)], rng_for("pool"), trials=25)


def test_avg_pool2_values():
    x = T.tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    out = T.avg_pool2(x).data[0]
    assert out[0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_bce_with_logits_gradcheck():
    rng = rng_for("bce")
    target = (rng.random((3, 4)) > 0.5).astype(np.float64)
    check_grads(lambda x: T.bce_with_logits(x, target), [(3, 4)], rng, trials=50)


def test_argmax_returns_indices():
    x = T.tensor([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]])
    assert np.array_equal(x.argmax(axis=1), [1, 0])


# ---------------------------------------------------------------- graph behavior

def test_composed_graph_matches_fd():
    # matmul -> relu -> softmax -> sum, end to end.
    def pipeline(a, b):
        return T.sum_(T.mul(T.softmax(T.relu(T.matmul(a, b)), axis=-1), 3.0))

    check_grads(pipeline, [(3, 4), (4, 5)], rng_for("composed"), trials=50, margin=0.05)


def test_gradients_accumulate_across_backward_calls():
    a = T.tensor([2.0], requires_grad=True)
    with T.Tape() as tape:
        y1 = T.mul(a, 3.0)
        y2 = T.mul(a, 5.0)
    tape.backward(y1)
    tape.backward(y2)
    assert a.grad[0] == pytest.approx(8.0)


def test_no_tape_means_no_recording():
    a = T.tensor([1.0], requires_grad=True)
    out = T.mul(a, 2.0)
    assert out.requires_grad
    assert a.grad is None


def test_nan_inf_raise():
    with pytest.raises(T.NumericsError):
        T.Tensor([np.inf])
    big = T.tensor([3.0e38])
    with pytest.raises(T.NumericsError):
        T.mul(big, 1.0e5)


def test_ops_deterministic():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((4, 4)).astype(np.float32)
    k = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    a = T.conv2d(T.tensor(np.broadcast_to(x, (4, 4, 4)).copy()), T.tensor(k)).data
    b = T.conv2d(T.tensor(np.broadcast_to(x, (4, 4, 4)).copy()), T.tensor(k)).data
    assert np.array_equal(a, b)
    s1 = T.softmax(T.tensor(x), axis=1).data
    s2 = T.softmax(T.tensor(x), axis=1).data
    assert np.array_equal(s1, s2)


def test_tape_rejects_nesting():
    with T.Tape():
        with pytest.raises(T.ConfigError):
            with T.Tape():
                pass
