import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from histoformer import ops
from histoformer.autograd import Tape, Tensor, backward, grad_check
from histoformer.errors import ConfigError, DimensionError, NumericError, PermutationError


def T(x, **kw):
    return Tensor(np.asarray(x, dtype=np.float64), **kw)


# ---------------------------------------------------------------- matmul

def test_matmul_identity(rng):
    b = rng.standard_normal((2, 2))
    np.testing.assert_array_equal(ops.matmul(T(np.eye(2)), T(b)).data, b)


def test_matmul_hand_value():
    out = ops.matmul(T([[1, 2], [3, 4]]), T([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_batch_of_identical_pairs(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    out = ops.matmul(T(np.stack([a] * 3)), T(np.stack([b] * 3))).data
    assert out.shape == (3, 3, 2)
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(T(np.zeros((2, 3))), T(np.zeros((2, 3))))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax_last(T([7.0] * 4)).data, [0.25] * 4)


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((3, 5))
    np.testing.assert_allclose(ops.softmax_last(T(x)).data, ops.softmax_last(T(x + 13.5)).data, atol=1e-15)


def test_softmax_hand_value():
    np.testing.assert_allclose(ops.softmax_last(T([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ops.softmax_last(T([0.0, np.nan]))


@given(hnp.arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax_last(T(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)


# ----------------------------------------------------- argsort/gather/scatter

def test_argsort_examples():
    np.testing.assert_array_equal(ops.argsort_last(T([3, 1, 2])).indices, [1, 2, 0])
    np.testing.assert_array_equal(ops.argsort_last(T([1, 2, 3])).indices, [0, 1, 2])
    np.testing.assert_array_equal(ops.argsort_last(T([5, 5, 5])).indices, [0, 1, 2])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_argsort_is_stable_with_ties(dtype, rng):
    x = rng.integers(0, 4, size=(6, 50)).astype(dtype)
    x[0, :5] = -0.0
    x[0, 5:10] = 0.0
    got = ops.argsort_last(Tensor(x, dtype=dtype)).indices
    np.testing.assert_array_equal(got, np.argsort(x, axis=-1, kind="stable"))


def test_argsort_descending(rng):
    x = rng.standard_normal((3, 9)).astype(np.float32)
    p = ops.argsort_last(Tensor(x), ascending=False)
    assert (np.diff(ops.gather_last(Tensor(x), p).data, axis=-1) <= 0).all()


def test_gather_examples(rng):
    x = T(rng.standard_normal((2, 5)))
    np.testing.assert_array_equal(ops.gather_last(x, ops.PermutationIndex.identity((2, 5))).data, x.data)
    np.testing.assert_array_equal(ops.gather_last(T([10, 20, 30]), ops.PermutationIndex([2, 0, 1])).data, [30, 10, 20])
    s = ops.gather_last(x, ops.argsort_last(x)).data
    assert (np.diff(s, axis=-1) >= 0).all()


def test_scatter_examples(rng):
    p = ops.PermutationIndex([2, 0, 1])
    np.testing.assert_array_equal(ops.scatter_last(T([30, 10, 20]), p).data, [10, 20, 30])
    x = T(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(ops.scatter_last(x, ops.PermutationIndex.identity((3, 4))).data, x.data)


def test_gather_out_of_range_index():
    with pytest.raises(PermutationError):
        ops.PermutationIndex([0, 3, 1])


def test_scatter_rejects_non_permutation():
    with pytest.raises(PermutationError):
        ops.PermutationIndex([0, 0, 1])


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=9),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_sort_gather_scatter_round_trip(x):
    t = Tensor(x)
    p = ops.argsort_last(t)
    back = ops.scatter_last(ops.gather_last(t, p), p).data
    assert back.tobytes() == x.tobytes()


def test_permutation_inverse_and_tile(rng):
    p = ops.argsort_last(T(rng.standard_normal((2, 6))))
    inv = p.inverse()
    np.testing.assert_array_equal(np.take_along_axis(p.indices, inv.indices, -1), np.tile(np.arange(6), (2, 1)))
    assert p.tile(2, axis=0).shape == (4, 6)


def test_gather_gradient_is_all_ones(rng):
    x = T(rng.standard_normal((3, 8)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.gather_last(x, ops.argsort_last(x)))
    g = backward(tape, loss)[x]
    np.testing.assert_array_equal(g, np.ones_like(g))


# ---------------------------------------------------------------- convolutions

def test_depthwise_identity_kernel(rng):
    x = rng.standard_normal((3, 5, 6))
    w = np.zeros((3, 3, 3))
    w[:, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv2d_depthwise(T(x), T(w)).data, x)


def test_depthwise_ones_on_constant_is_nine_c():
    out = ops.conv2d_depthwise(T(np.full((2, 5, 5), 0.7)), T(np.ones((2, 3, 3)))).data
    np.testing.assert_allclose(out, 6.3, rtol=1e-14)


def _reflect_index(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def _brute_force_correlate(x, k):
    """Direct correlation with reflect borders, one output pixel at a time."""
    c, h, w = x.shape
    r = k.shape[-1] // 2
    out = np.zeros_like(x)
    for ch in range(c):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for i in range(-r, r + 1):
                    for j in range(-r, r + 1):
                        acc += k[ch, i + r, j + r] * x[ch, _reflect_index(y + i, h), _reflect_index(xx + j, w)]
                out[ch, y, xx] = acc
    return out


def test_dilated_depthwise_matches_zero_inflated_5x5(rng):
    x = rng.standard_normal((1, 7, 7))
    k3 = rng.standard_normal((1, 3, 3))
    k5 = np.zeros((1, 5, 5))
    k5[:, ::2, ::2] = k3
    got = ops.conv2d_depthwise(T(x), T(k3), dilation=2).data
    np.testing.assert_allclose(got, _brute_force_correlate(x, k5), atol=1e-12)


def test_depthwise_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ops.conv2d_depthwise(T(np.zeros((1, 4, 4))), T(np.zeros((1, 2, 2))))


def test_pointwise_examples(rng):
    x = rng.standard_normal((2, 3, 3))
    np.testing.assert_array_equal(ops.conv2d_pointwise(T(x), T(np.eye(2)), T(np.zeros(2))).data, x)
    np.testing.assert_array_equal(ops.conv2d_pointwise(T(x), T([[1.0, 1.0]])).data[0], x[0] + x[1])
    w = rng.standard_normal((4, 2))
    oracle = ops.matmul(T(w), T(x.reshape(2, 9))).data.reshape(4, 3, 3)
    np.testing.assert_allclose(ops.conv2d_pointwise(T(x), T(w)).data, oracle, atol=1e-14)


def test_pointwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d_pointwise(T(np.zeros((3, 2, 2))), T(np.zeros((4, 2))))


def test_full_conv_matches_brute_force(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    got = ops.conv2d(T(x), T(w)).data
    want = np.stack([
        sum(_brute_force_correlate(x[ci:ci + 1], w[co:co + 1, ci])[0] for ci in range(2)) for co in range(3)
    ])
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------- resampling

def test_pixel_shuffle_shape_and_layout():
    x = T(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
    out = ops.pixel_shuffle(x, 2).data
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out[0], [[1, 2], [3, 4]])


def test_pixel_shuffle_layout_formula(rng):
    r, c, h, w = 2, 3, 2, 3
    x = rng.standard_normal((c * r * r, h, w))
    out = ops.pixel_shuffle(T(x), r).data
    for ch in range(c):
        for i in range(r):
            for j in range(r):
                np.testing.assert_array_equal(out[ch, i::r, j::r], x[ch * r * r + i * r + j])


def test_shuffle_round_trip(rng):
    x = rng.standard_normal((8, 4, 4))
    assert ops.pixel_shuffle(ops.pixel_unshuffle(T(x), 2), 2).data.tobytes() == x.tobytes()
    assert ops.pixel_unshuffle(ops.pixel_shuffle(T(x), 2), 2).data.tobytes() == x.tobytes()


def test_shuffle_divisibility_errors():
    with pytest.raises(ConfigError):
        ops.pixel_shuffle(T(np.zeros((3, 2, 2))), 2)
    with pytest.raises(ConfigError):
        ops.pixel_unshuffle(T(np.zeros((1, 3, 4))), 2)


def test_avg_pool_examples(rng):
    np.testing.assert_array_equal(ops.avg_pool2d(T(np.full((2, 4, 4), 3.0)), 2).data, np.full((2, 2, 2), 3.0))
    assert ops.avg_pool2d(T([[[1.0, 2.0], [3.0, 4.0]]]), 2).data.item() == 2.5
    x = rng.standard_normal((2, 3, 5))
    np.testing.assert_array_equal(ops.avg_pool2d(T(x), 1, 1).data, x)
    with pytest.raises(ConfigError):
        ops.avg_pool2d(T(np.zeros((1, 2, 2))), 3)


# ---------------------------------------------------------------- activations

def test_mish_values():
    assert ops.mish(T([0.0])).data[0] == 0.0
    assert abs(ops.mish(T([20.0])).data[0] - 20.0) < 1e-6
    assert abs(ops.mish(T([-20.0])).data[0]) < 1e-6


def test_mish_float32_extremes_are_finite():
    y = ops.mish(Tensor(np.array([-200.0, -30.0, 0.0, 30.0, 200.0], dtype=np.float32))).data
    assert np.isfinite(y).all()


def test_layer_norm_examples(rng):
    one, zero = T(np.ones(2)), T(np.zeros(2))
    const = ops.layer_norm_channels(T(np.full((2, 3, 3), 5.0)), one, zero).data
    np.testing.assert_array_equal(const, 0.0)
    pair = ops.layer_norm_channels(T(np.array([1.0, 3.0]).reshape(2, 1, 1)), one, zero).data.ravel()
    np.testing.assert_allclose(pair, [-1, 1], atol=1e-3)
    bias = rng.standard_normal(4)
    # with unit gain the normalised channels average to zero, leaving the mean bias
    out = ops.layer_norm_channels(T(rng.standard_normal((4, 5, 5))), T(np.ones(4)), T(bias)).data
    np.testing.assert_allclose(out.mean(axis=0), bias.mean(), atol=1e-4)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("op", ["add", "mul", "sub", "div"])
def test_broadcast_gradients_reduce_to_operand_shape(op, rng, f64):
    a = T(rng.standard_normal((2, 3, 4)))
    b = T(1.5 + rng.random((3, 1)))
    w = T(rng.standard_normal((2, 3, 4)))
    err, _ = grad_check(lambda a, b: ops.sum(ops.mul(getattr(ops, op)(a, b), w)), [a, b])
    assert err < 1e-6


def test_sum_of_squares_grad_check_matches_tolerance(rng, f64):
    x = T(rng.standard_normal((4, 5)))
    err, _ = grad_check(lambda x: ops.sum(ops.mul(x, x)), [x], eps=1e-5)
    assert err <= 1e-9


def test_grad_check_detects_a_wrong_vjp(rng, f64):
    from histoformer.autograd import record

    def bad_square(x):
        return record("bad", (x,), x.data ** 2, lambda g: (g * x.data,))  # missing factor 2

    err, _ = grad_check(lambda x: ops.sum(bad_square(x)), [T(rng.standard_normal(5))])
    assert err > 0.3


def test_grad_check_skips_probes_that_reorder_a_sort(f64):
    # values 1e-4 apart: a 1e-2 step would swap them, the checker must shrink instead.
    # Without the guard the error is O(1); with it, only roundoff of the shrunk step remains.
    x = T([0.0, 1e-4, 5.0])
    w = T([1.0, -2.0, 3.0])
    err, details = grad_check(lambda x: ops.sum(ops.mul(ops.gather_last(ops.mul(x, x), ops.argsort_last(x)), w)),
                              [x], eps=1e-2)
    assert err < 1e-6
    assert details[0][3] == 0


def test_all_primitives_pass_64bit_gradcheck():
    from histoformer.gradcheck import run_gradcheck

    results = run_gradcheck("ops", f64=True)
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad


def test_sqrt_and_abs_values():
    np.testing.assert_array_equal(ops.sqrt(T([4.0, 9.0])).data, [2, 3])
    np.testing.assert_array_equal(ops.abs(T([-1.5, 2.0])).data, [1.5, 2])


def test_split_and_slice(rng):
    x = T(rng.standard_normal((4, 3)))
    a, b = ops.split(x, 2, axis=0)
    np.testing.assert_array_equal(np.concatenate([a.data, b.data]), x.data)
    np.testing.assert_array_equal(ops.slice_axis(x, -1, 1, 3).data, x.data[:, 1:3])
    with pytest.raises(ConfigError):
        ops.split(x, 3, axis=0)


def test_pad_edge_repeats_last(rng):
    x = T(rng.standard_normal((2, 4)))
    out = ops.pad_edge_last(x, 3).data
    np.testing.assert_array_equal(out[:, 4:], np.repeat(x.data[:, 3:], 3, axis=1))


def test_ops_are_deterministic(rng):
    x = rng.standard_normal((4, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3)).astype(np.float32)
    a = ops.conv2d_depthwise(Tensor(x), Tensor(w), 2).data
    b = ops.conv2d_depthwise(Tensor(x), Tensor(w), 2).data
    assert a.tobytes() == b.tobytes()
