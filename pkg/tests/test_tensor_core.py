from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metricunet.errors import DimensionError, ValidationError
from metricunet.tensor_core import (
    FORMAT_VERSION,
    Tensor,
    add,
    batchnorm2d,
    concat,
    conv2d,
    gradient_check,
    load_checkpoint,
    maxpool2d,
    no_grad,
    poly_lr,
    precision,
    relu,
    save_checkpoint,
    scale,
    sgd_step,
    softmax_cross_entropy,
    transposed_conv2d,
)


def t64(a, requires_grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar ``sum(out * w)`` for a fixed random ``w`` (keeps every output entry in play)."""
    w = np.random.default_rng(seed).standard_normal(out.shape)

    def backward(g):
        out.accumulate_grad(g * w)

    return Tensor.from_op(np.asarray((out.data * w).sum()), (out,), backward)


def naive_conv(x, w, b, padding):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    out[i, o, r, s] = (xp[i, :, r : r + k, s : s + k] * w[o]).sum() + (0 if b is None else b[o])
    return out


# --- conv2d ----------------------------------------------------------------


def test_conv_identity_1x1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 5, 6)).astype(np.float32)
    w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_center_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, None, padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0
    assert out[0, 2] == 4.0 and out[2, 0] == 4.0 and out[2, 2] == 4.0


@pytest.mark.parametrize("padding", [0, 1])
def test_conv_matches_direct_summation(padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    with precision(np.float64):
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=padding).data
    np.testing.assert_allclose(out, naive_conv(x, w, b, padding), atol=1e-12)


def test_conv_gradcheck():
    rng = np.random.default_rng(2)
    x, w, b = t64(rng.standard_normal((2, 3, 8, 8))), t64(rng.standard_normal((4, 3, 3, 3))), t64(rng.standard_normal(4))
    err = gradient_check(lambda: weighted_sum(conv2d(x, w, b, padding=1)), [x, w, b])
    assert err < 1e-4


def test_conv_output_size_formula():
    x = Tensor(np.zeros((1, 2, 9, 7)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    out = conv2d(x, w, None, stride=2, padding=1)
    assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


# --- transposed conv -------------------------------------------------------


def test_tconv_single_pixel_expansion():
    out = transposed_conv2d(Tensor(np.full((1, 1, 1, 1), 3.5)), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.5))


def test_tconv_gradcheck():
    rng = np.random.default_rng(3)
    x, w, b = t64(rng.standard_normal((2, 3, 4, 4))), t64(rng.standard_normal((3, 2, 2, 2))), t64(rng.standard_normal(2))
    err = gradient_check(lambda: weighted_sum(transposed_conv2d(x, w, b)), [x, w, b])
    assert err < 1e-4


def test_tconv_then_pool_keeps_shape():
    x = Tensor(np.random.default_rng(4).standard_normal((1, 3, 5, 6)))
    w = np.zeros((3, 3, 2, 2))
    for c in range(3):
        w[c, c] = 1.0
    out = maxpool2d(transposed_conv2d(x, Tensor(w)))
    assert out.shape == x.shape
    np.testing.assert_allclose(out.data, x.data)


def test_tconv_channel_mismatch():
    with pytest.raises(DimensionError):
        transposed_conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))))


# --- maxpool ---------------------------------------------------------------


def test_maxpool_constant_and_single_window():
    np.testing.assert_array_equal(maxpool2d(Tensor(np.full((1, 2, 4, 4), 1.5))).data, np.full((1, 2, 2, 2), 1.5))
    assert maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0


def test_maxpool_tie_routes_to_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    maxpool2d(x).backward(np.ones((1, 1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_gradcheck_distinct_values():
    vals = np.random.default_rng(5).permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.01
    x = t64(vals)
    assert gradient_check(lambda: weighted_sum(maxpool2d(x)), [x], eps=1e-4) < 1e-4


def test_maxpool_odd_size_raises():
    with pytest.raises(DimensionError):
        maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))


# --- batch norm ------------------------------------------------------------


def test_batchnorm_eval_identity():
    x = np.random.default_rng(6).standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False, eps=0.0)
    np.testing.assert_allclose(out.data, x, atol=1e-7)


def test_batchnorm_train_normalizes():
    x = np.random.default_rng(7).normal(3.0, 2.0, (4, 3, 5, 5))
    with precision(np.float64):
        out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True)
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, 0.0, atol=1e-6)
    # eps=1e-5 shrinks the variance by var/(var+eps).
    expected = x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5)
    np.testing.assert_allclose(var, expected, atol=1e-6)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(8).normal(2.0, 3.0, (2, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    batchnorm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    n = 2 * 4 * 4
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batchnorm_zero_variance_channel_is_finite():
    x = Tensor(np.full((2, 1, 3, 3), 5.0))
    out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), training=True)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, 0.0)


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(9)
    x, g, b = t64(rng.standard_normal((3, 2, 4, 4))), t64(rng.uniform(0.5, 1.5, 2)), t64(rng.standard_normal(2))

    def f():
        return weighted_sum(batchnorm2d(x, g, b, np.zeros(2), np.ones(2), training=True))

    assert gradient_check(f, [x, g, b]) < 1e-4


# --- relu / concat / cross-entropy -----------------------------------------


def test_relu_and_concat_gradcheck():
    rng = np.random.default_rng(10)
    a = t64(rng.standard_normal((2, 2, 3, 3)) + 0.05)
    b = t64(rng.standard_normal((2, 3, 3, 3)))
    assert gradient_check(lambda: weighted_sum(concat(relu(a), b, axis=1)), [a, b]) < 1e-4


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        concat(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 2))))


def test_cross_entropy_saturated_and_uniform():
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 0], logits[0, 1] = 10.0, -10.0
    with precision(np.float64):
        sat = softmax_cross_entropy(Tensor(logits), np.zeros((1, 1, 1), np.uint8)).item()
        uni = softmax_cross_entropy(Tensor(np.zeros((2, 2, 3, 3))), np.random.default_rng(0).integers(0, 2, (2, 3, 3))).item()
    assert sat == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert sat < 3e-9
    assert uni == pytest.approx(math.log(2.0), abs=1e-12)


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(11)
    logits = t64(rng.standard_normal((1, 2, 4, 4)))
    labels = rng.integers(0, 2, (1, 4, 4))
    assert gradient_check(lambda: softmax_cross_entropy(logits, labels), [logits]) < 1e-4


def test_cross_entropy_rejects_non_binary_labels():
    with pytest.raises(ValidationError):
        softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))


# --- graph mechanics -------------------------------------------------------


def test_diamond_graph_accumulates():
    rng = np.random.default_rng(12)
    x = t64(rng.standard_normal((1, 2, 4, 4)))

    def f():
        h = relu(x)
        return weighted_sum(add(scale(h, 2.0), h))

    assert gradient_check(f, [x]) < 1e-4
    x.zero_grad()
    weighted_sum(add(relu(x), relu(x)), seed=3).backward()
    w = np.random.default_rng(3).standard_normal(x.shape)
    np.testing.assert_allclose(x.grad, 2 * w * (x.data > 0))


def test_linear_op_gradcheck_is_exact():
    x = t64(np.random.default_rng(13).standard_normal((1, 2, 3, 3)))
    assert gradient_check(lambda: weighted_sum(scale(x, 3.0)), [x]) < 1e-8


def test_gradcheck_detects_corrupted_backward():
    x = t64(np.random.default_rng(14).standard_normal((1, 1, 3, 3)))

    def broken():
        y = relu(x)

        def bad_backward(g):
            x.accumulate_grad(g * 1.5 * (x.data > 0))

        return weighted_sum(Tensor.from_op(y.data, (x,), bad_backward))

    assert gradient_check(broken, [x]) > 1e-2


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        gradient_check(lambda: None, [Tensor(np.zeros(2), dtype=np.float32)])


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = relu(x)
    assert not y.requires_grad


def test_forward_is_bitwise_repeatable():
    rng = np.random.default_rng(15)
    x, w = rng.standard_normal((2, 3, 8, 8)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = conv2d(Tensor(x), Tensor(w), padding=1).data
    b = conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# --- optimisation ----------------------------------------------------------


def test_poly_lr_values():
    assert poly_lr(0, 100) == 0.01
    assert poly_lr(100, 100) == 0.0
    assert poly_lr(50, 100, 0.01, 0.9) == pytest.approx(0.01 * 0.5**0.9, rel=1e-15)
    with pytest.raises(ValidationError):
        poly_lr(101, 100)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999), st.integers(1, 1000))
def test_poly_lr_monotone(it, max_iter):
    it = min(it, max_iter - 1)
    assert 0.0 <= poly_lr(it + 1, max_iter) <= poly_lr(it, max_iter) <= 0.01


def test_sgd_step():
    p = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
    sgd_step([p], [np.array([0.5, -1.0])], 0.1)
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    with pytest.raises(ValidationError):
        sgd_step([p], [np.zeros(2)], -0.1)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"conv1a.weight": np.random.default_rng(0).standard_normal((2, 3, 3, 3)), "bias": np.arange(4.0)}
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for k, v in arrays.items():
        assert loaded[k].dtype == np.dtype("<f4")
        np.testing.assert_array_equal(loaded[k], v.astype(np.float32))
    with np.load(path) as raw:
        assert int(raw["__format_version__"]) == FORMAT_VERSION
