import math

import numpy as np
import pytest

from histoformer import ops
from histoformer.attention import (dhsa_forward, dynamic_range_conv, histogram_attention, histogram_reshape_bhr,
                                   histogram_reshape_fhr, histogram_unreshape_bhr, histogram_unreshape_fhr,
                                   init_dhsa, sort_cols, sort_rows)
from histoformer.autograd import Tape, Tensor, backward, grad_check, precision
from histoformer.errors import ConfigError
from histoformer.gradcheck import EPS, ORDER

from .conftest import distinct


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def params(c, heads=1, bins=4, seed=0, **kw):
    return init_dhsa(c, heads, bins, np.random.default_rng(seed), np.float64, **kw)


# ---------------------------------------------------------- dynamic range

def test_constant_channels_survive_both_sorts():
    x = T(np.broadcast_to(np.array([1.0, -2.0])[:, None, None], (2, 4, 5)).copy())
    np.testing.assert_array_equal(sort_cols(sort_rows(x)).data, x.data)


def test_sorted_layout_is_monotone_and_value_conserving(rng):
    x = T(rng.standard_normal((3, 6, 7)))
    rows = sort_rows(x).data
    assert np.all(np.diff(rows, axis=-1) >= 0)
    both = sort_cols(sort_rows(x)).data
    assert np.all(np.diff(both, axis=-2) >= 0)
    for c in range(3):
        np.testing.assert_array_equal(np.sort(both[c].ravel()), np.sort(x.data[c].ravel()))


def test_identity_parameterisation_reproduces_recombined_input(rng):
    c = 2
    p = params(c)
    p.expand_pw = T(np.tile(np.eye(c), (5, 1)))  # each of the 5 groups copies the input channels
    kernel = np.zeros((5 * c, 3, 3))
    kernel[:, 1, 1] = 1.0
    p.expand_dw = T(kernel)
    x = T(rng.standard_normal((c, 4, 4)))
    out = dynamic_range_conv(x, p).data
    recombined = np.concatenate([sort_cols(sort_rows(T(x.data[:1]))).data, x.data[1:]])
    for g in range(5):
        np.testing.assert_array_equal(out[g * c:(g + 1) * c], recombined)


def test_vertical_first_order_is_selectable(rng):
    x = T(rng.standard_normal((2, 4, 4)))
    hv = dynamic_range_conv(x, params(2, sort_order="hv")).data
    vh = dynamic_range_conv(x, params(2, sort_order="vh")).data
    none = dynamic_range_conv(x, params(2, sort_order="none")).data
    assert not np.array_equal(hv, vh) and not np.array_equal(hv, none)


def test_odd_channel_count_is_rejected(rng):
    with pytest.raises(ConfigError, match="even channel count"):
        dynamic_range_conv(T(rng.standard_normal((3, 4, 4))), params(3, heads=1))


# ----------------------------------------------------------- reshaping

def test_bhr_shape_law_and_bin_contents():
    x = T(np.arange(16.0).reshape(1, 2, 8))  # heads=1, c/k=2, L=8
    y = histogram_reshape_bhr(x, 4)
    assert y.shape == (1, 4, 4)
    # bin j holds sorted positions [2j, 2j+2) of both channels
    np.testing.assert_array_equal(y.data[0, 1], [2, 3, 10, 11])
    np.testing.assert_array_equal(histogram_unreshape_bhr(y, 2).data, x.data)


def test_bhr_single_bin_holds_whole_sequence():
    x = T(np.arange(16.0).reshape(1, 2, 8))
    y = histogram_reshape_bhr(x, 1)
    assert y.shape == (1, 1, 16)
    np.testing.assert_array_equal(y.data.ravel(), x.data.ravel())


def test_fhr_shape_law_and_slots():
    x = T(np.arange(16.0).reshape(1, 2, 8))
    y = histogram_reshape_fhr(x, 4)
    assert y.shape == (1, 2, 4, 2)
    for i in range(8):
        np.testing.assert_array_equal(y.data[0, i // 4, i % 4], [i, 8 + i])
    np.testing.assert_array_equal(histogram_unreshape_fhr(y).data, x.data)


def test_fhr_full_width_bin_is_global():
    y = histogram_reshape_fhr(T(np.arange(8.0).reshape(1, 1, 8)), 8)
    assert y.shape == (1, 1, 8, 1)


def test_sequence_not_multiple_of_bins_is_rejected():
    with pytest.raises(ConfigError, match="multiple"):
        histogram_reshape_bhr(T(np.zeros((1, 1, 7))), 2)


# ---------------------------------------------------------- attention

def _mean_oracle(v_sorted, bins):
    """Q = K = 0: uniform softmax, each branch returns means of its value tokens."""
    n = v_sorted.size
    per = n // bins
    bhr = np.tile(v_sorted.reshape(bins, per).mean(axis=0), bins)
    fhr = np.repeat(v_sorted.reshape(per, bins).mean(axis=1), bins)
    return bhr * fhr


def test_zero_query_key_gives_product_of_branch_means(rng, f64):
    v = T(distinct(rng, 1, 4, 4))
    zeros = T(np.zeros((2, 4, 4)))
    out = histogram_attention(v, zeros, zeros, params(1, bins=4)).data.ravel()
    order = np.argsort(v.data.ravel(), kind="stable")
    expected = np.empty(16)
    expected[order] = _mean_oracle(v.data.ravel()[order], 4)
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-15)


def test_zero_value_gives_zero_output(rng):
    fqk = T(rng.standard_normal((4, 3, 4)))
    out = histogram_attention(T(np.zeros((2, 3, 4))), fqk, fqk, params(2, bins=3))
    np.testing.assert_array_equal(out.data, 0)


def test_single_slot_frequency_bins_make_exact_identity_attention(rng):
    # one token per frequency group: softmax is exactly 1 and the branch returns sorted V
    v = T(distinct(rng, 2, 3, 5))
    q = T(rng.standard_normal((4, 3, 5)))
    out = histogram_attention(v, q, q, params(2, bins=1, branches="fhr"))
    np.testing.assert_array_equal(out.data, v.data)
    both = histogram_attention(v, q, q, params(2, bins=1))
    np.testing.assert_array_equal(both.data, v.data * v.data)


def test_sentinel_gradient_lands_at_its_source_pixel(rng):
    v = Tensor(distinct(rng, 1, 4, 4), requires_grad=True)
    q = T(rng.standard_normal((2, 4, 4)))
    p = params(1, bins=1, branches="fhr")
    ctx = []
    with Tape() as tape:
        out = histogram_attention(v, q, q, p, context=ctx)
    seed = np.zeros((1, 4, 4))
    seed[0, 2, 1] = 7.0
    g = backward(tape, out, seed=seed)[v]
    np.testing.assert_array_equal(g, seed)
    d = ctx[0].perm.indices[0]
    assert np.all(np.diff(v.data.ravel()[d]) > 0)  # d is the ascending sort of V


@pytest.mark.parametrize("c,h,w,bins", [(2, 3, 3, 3), (2, 3, 3, 4), (4, 5, 6, 4), (4, 8, 8, 8)])
def test_spatial_permutation_equivariance_is_bitwise(c, h, w, bins, rng):
    p = params(c, heads=2 if c == 4 else 1, bins=bins)
    for _ in range(10):
        v = distinct(rng, c, h, w)
        f1, f2 = rng.standard_normal((2, 2 * c, h, w))
        pi = rng.permutation(h * w)

        def perm(a):
            return a.reshape(a.shape[0], -1)[:, pi].reshape(a.shape)

        base = histogram_attention(T(v), T(f1), T(f2), p).data
        moved = histogram_attention(T(perm(v)), T(perm(f1)), T(perm(f2)), p).data
        np.testing.assert_array_equal(moved, perm(base))


def test_branches_ignore_each_others_query_key(rng):
    v = T(distinct(rng, 2, 4, 4))
    f1, f2 = T(rng.standard_normal((4, 4, 4))), T(rng.standard_normal((4, 4, 4)))
    zero = T(np.zeros((4, 4, 4)))
    bhr, fhr = params(2, branches="bhr"), params(2, branches="fhr")
    np.testing.assert_array_equal(histogram_attention(v, f1, zero, bhr).data, histogram_attention(v, f1, f2, bhr).data)
    np.testing.assert_array_equal(histogram_attention(v, zero, f2, fhr).data, histogram_attention(v, f1, f2, fhr).data)
    fused = histogram_attention(v, f1, f2, params(2)).data
    np.testing.assert_array_equal(fused, histogram_attention(v, f1, f2, bhr).data * histogram_attention(v, f1, f2, fhr).data)


def test_padding_repeats_last_sorted_value_and_is_dropped(rng, f64):
    # 9 pixels in 4 bins -> 3 padded slots; output still has 9 finite pixels
    out = histogram_attention(T(distinct(rng, 2, 3, 3)), T(rng.standard_normal((4, 3, 3))),
                              T(rng.standard_normal((4, 3, 3))), params(2, bins=4), context=(ctx := []))
    assert out.shape == (2, 3, 3) and np.all(np.isfinite(out.data))
    assert ctx[0].pad_count == 3


def test_score_scaling_follows_head_count_by_default(rng):
    v = T(distinct(rng, 4, 4, 4))
    f1, f2 = T(rng.standard_normal((8, 4, 4))), T(rng.standard_normal((8, 4, 4)))
    heads = histogram_attention(v, f1, f2, params(4, heads=2)).data
    keydim = histogram_attention(v, f1, f2, params(4, heads=2, scale="key_dim")).data
    assert not np.array_equal(heads, keydim)
    # with one head the literal 1/sqrt(k) scaling is 1: scores equal unscaled q.k
    one = params(2, heads=1)
    from histoformer.attention import _score_scale
    assert _score_scale(one, 8) == 1.0
    assert _score_scale(params(4, heads=4), 8) == 1 / math.sqrt(4)


def test_bins_beyond_pixel_count_are_rejected(rng):
    with pytest.raises(ConfigError, match="exceed"):
        histogram_attention(T(np.zeros((2, 2, 2))), T(np.zeros((4, 2, 2))), T(np.zeros((4, 2, 2))), params(2, bins=5))


def test_mismatched_query_key_shape_is_rejected():
    with pytest.raises(ConfigError, match="do not match"):
        histogram_attention(T(np.zeros((2, 2, 2))), T(np.zeros((2, 2, 2))), T(np.zeros((4, 2, 2))), params(2))


def test_heads_must_divide_channels(rng):
    with pytest.raises(ConfigError, match="heads"):
        params(6, heads=4)


def test_batched_attention_matches_per_image(rng):
    p = params(2, bins=4)
    v = distinct(rng, 3, 2, 4, 4)
    f1, f2 = rng.standard_normal((2, 3, 4, 4, 4))
    batched = histogram_attention(T(v), T(f1), T(f2), p).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], histogram_attention(T(v[i]), T(f1[i]), T(f2[i]), p).data)


# -------------------------------------------------------------- block

def test_dhsa_preserves_shape():
    x = Tensor(np.random.default_rng(0).standard_normal((36, 32, 32)).astype(np.float32))
    p = init_dhsa(36, 1, 36, np.random.default_rng(1))
    assert dhsa_forward(x, p).shape == (36, 32, 32)


def test_zero_output_projection_zeroes_block(rng):
    p = params(4, heads=2)
    p.out_pw = T(np.zeros((4, 4)))
    np.testing.assert_array_equal(dhsa_forward(T(rng.standard_normal((4, 4, 4))), p).data, 0)


@pytest.mark.parametrize("c,hw,heads", [(4, 6, 1), (2, 8, 1)])
def test_dhsa_end_to_end_gradcheck(c, hw, heads):
    rng = np.random.default_rng(5)
    with precision(np.float64):
        p = params(c, heads=heads, bins=4, seed=6)
        w = rng.standard_normal((c, hw, hw))

        def f(x, pw, dw, out):
            p.expand_pw, p.expand_dw, p.out_pw = pw, dw, out
            return ops.sum(ops.mul(dhsa_forward(x, p), w))

        err, details = grad_check(f, [T(distinct(rng, c, hw, hw)), p.expand_pw, p.expand_dw, p.out_pw],
                                  eps=EPS, order=ORDER)
    assert err <= 1e-6
    assert sum(d[3] for d in details) == 0
