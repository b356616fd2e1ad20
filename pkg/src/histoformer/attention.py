"""Dynamic-range histogram self-attention (DHSA).

The block sorts half of its input channels along rows and columns before a
separable convolution, then sorts the Value map per channel, groups the
sorted pixels into equal-size bins and runs two attention branches over them:

* bin-wise (BHR): tokens are the ``B`` bins, features are the flattened bin
  contents of one head;
* frequency-wise (FHR): the sequence is cut into ``L/B`` groups of ``B``
  neighbouring intensities and attention runs inside each group.

The branch outputs are multiplied elementwise and scattered back to the
original pixel positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ConfigError

SORT_ORDERS = ("hv", "vh", "none")
BRANCHES = ("both", "bhr", "fhr")
SCALES = ("heads", "key_dim")


@dataclass
class DHSAParams:
    ln_gain: Tensor
    ln_bias: Tensor
    expand_pw: Tensor  # [5C, C]
    expand_dw: Tensor  # [5C, 3, 3]
    out_pw: Tensor  # [C, C]
    heads: int = 1
    bins: int = 4
    scale: str = "heads"
    sort_order: str = "hv"
    branches: str = "both"

    def __post_init__(self):
        c = self.out_pw.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"{c} channels cannot be split over {self.heads} heads")
        if self.bins < 1:
            raise ConfigError(f"bins must be positive, got {self.bins}")
        if self.scale not in SCALES:
            raise ConfigError(f"unknown score scaling {self.scale!r}")
        if self.sort_order not in SORT_ORDERS:
            raise ConfigError(f"unknown sort order {self.sort_order!r}")
        if self.branches not in BRANCHES:
            raise ConfigError(f"unknown branch selection {self.branches!r}")

    @property
    def channels(self) -> int:
        return self.out_pw.shape[0]

    @staticmethod
    def shapes(channels: int) -> dict:
        return {
            "ln_gain": (channels,),
            "ln_bias": (channels,),
            "expand_pw": (5 * channels, channels),
            "expand_dw": (5 * channels, 3, 3),
            "out_pw": (channels, channels),
        }


@dataclass
class SortContext:
    """Permutation ``d`` of the flattened pixels plus the bin padding."""

    perm: ops.PermutationIndex
    pad_count: int


# ------------------------------------------------------------------ sorting

def sort_rows(x: Tensor) -> Tensor:
    return ops.gather_last(x, ops.argsort_last(x))


def sort_cols(x: Tensor) -> Tensor:
    n = x.ndim
    swap = tuple(range(n - 2)) + (n - 1, n - 2)
    xt = ops.transpose(x, swap)
    return ops.transpose(sort_rows(xt), swap)


def dynamic_range_conv(F: Tensor, params: DHSAParams) -> Tensor:
    """Sort the first channel half along rows then columns, expand to 5C, depthwise 3x3."""
    c = F.shape[-3]
    if c % 2:
        raise ConfigError(f"dynamic-range convolution needs an even channel count, got {c}")
    f1, f2 = ops.split(F, 2, axis=-3)
    if params.sort_order == "hv":
        f1 = sort_cols(sort_rows(f1))
    elif params.sort_order == "vh":
        f1 = sort_rows(sort_cols(f1))
    x = ops.concat([f1, f2], axis=-3)
    x = ops.conv2d_pointwise(x, params.expand_pw)
    return ops.conv2d_depthwise(x, params.expand_dw)


# -------------------------------------------------------------- reshaping

def _check_bins(length: int, bins: int):
    if length % bins:
        raise ConfigError(f"sequence length {length} is not a multiple of {bins} bins")


def histogram_reshape_bhr(x: Tensor, bins: int) -> Tensor:
    """``[..., heads, c, L] -> [..., heads, B, c*L/B]``; bin j holds positions ``[j*L/B, (j+1)*L/B)``."""
    *lead, heads, c, length = x.shape
    _check_bins(length, bins)
    n = len(lead)
    y = ops.reshape(x, (*lead, heads, c, bins, length // bins))
    y = ops.transpose(y, (*range(n), n, n + 2, n + 1, n + 3))
    return ops.reshape(y, (*lead, heads, bins, c * (length // bins)))


def histogram_unreshape_bhr(y: Tensor, c: int) -> Tensor:
    *lead, heads, bins, feat = y.shape
    per_bin = feat // c
    n = len(lead)
    x = ops.reshape(y, (*lead, heads, bins, c, per_bin))
    x = ops.transpose(x, (*range(n), n, n + 2, n + 1, n + 3))
    return ops.reshape(x, (*lead, heads, c, bins * per_bin))


def histogram_reshape_fhr(x: Tensor, bins: int) -> Tensor:
    """``[..., heads, c, L] -> [..., heads, L/B, B, c]``; element i lands in group ``i // B`` slot ``i % B``."""
    *lead, heads, c, length = x.shape
    _check_bins(length, bins)
    n = len(lead)
    y = ops.reshape(x, (*lead, heads, c, length // bins, bins))
    return ops.transpose(y, (*range(n), n, n + 2, n + 3, n + 1))


def histogram_unreshape_fhr(y: Tensor) -> Tensor:
    *lead, heads, groups, bins, c = y.shape
    n = len(lead)
    x = ops.transpose(y, (*range(n), n, n + 3, n + 1, n + 2))
    return ops.reshape(x, (*lead, heads, c, groups * bins))


# -------------------------------------------------------------- attention

def scaled_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    n = k.ndim
    kt = ops.transpose(k, tuple(range(n - 2)) + (n - 1, n - 2))
    scores = ops.mul(ops.matmul(q, kt), scale)
    return ops.matmul(ops.softmax_last(scores), v)


def _score_scale(params: DHSAParams, feature_dim: int) -> float:
    if params.scale == "heads":
        return 1.0 / math.sqrt(params.heads)
    return 1.0 / math.sqrt(feature_dim)


def histogram_attention(V: Tensor, FQK1: Tensor, FQK2: Tensor, params: DHSAParams,
                        context: list | None = None) -> Tensor:
    """Dual-branch attention over intensity-sorted pixels.

    ``V``: ``[..., C, H, W]``; ``FQK1``/``FQK2``: ``[..., 2C, H, W]``.  If
    ``context`` is a list, the :class:`SortContext` of this call is appended.
    """
    *lead, c, h, w = V.shape
    if FQK1.shape != (*lead, 2 * c, h, w) or FQK2.shape != FQK1.shape:
        raise ConfigError(f"query/key shapes {FQK1.shape}, {FQK2.shape} do not match value {V.shape}")
    n = h * w
    bins, heads = params.bins, params.heads
    if bins > n:
        raise ConfigError(f"{bins} bins exceed the {n} pixels of a {h}x{w} map")
    if c % heads:
        raise ConfigError(f"{c} channels cannot be split over {heads} heads")
    cd = len(lead)

    v = ops.reshape(V, (*lead, c, n))
    d = ops.argsort_last(v)
    v = ops.gather_last(v, d)
    # channel c of d drives both the query channel c and the key channel c + C
    d2 = d.tile(2, axis=cd)
    q1, k1 = ops.split(ops.gather_last(ops.reshape(FQK1, (*lead, 2 * c, n)), d2), 2, axis=cd)
    q2, k2 = ops.split(ops.gather_last(ops.reshape(FQK2, (*lead, 2 * c, n)), d2), 2, axis=cd)

    length = bins * -(-n // bins)
    pad = length - n
    if context is not None:
        context.append(SortContext(d, pad))
    per_head = (*lead, heads, c // heads, length)
    v, q1, k1, q2, k2 = (ops.reshape(ops.pad_edge_last(t, pad), per_head) for t in (v, q1, k1, q2, k2))

    branches = []
    if params.branches in ("both", "bhr"):
        qb, kb, vb = (histogram_reshape_bhr(t, bins) for t in (q1, k1, v))
        out_b = scaled_attention(qb, kb, vb, _score_scale(params, qb.shape[-1]))
        branches.append(histogram_unreshape_bhr(out_b, c // heads))
    if params.branches in ("both", "fhr"):
        qf, kf, vf = (histogram_reshape_fhr(t, bins) for t in (q2, k2, v))
        out_f = scaled_attention(qf, kf, vf, _score_scale(params, qf.shape[-1]))
        branches.append(histogram_unreshape_fhr(out_f))
    a = branches[0] if len(branches) == 1 else ops.mul(branches[0], branches[1])

    a = ops.reshape(a, (*lead, c, length))
    a = ops.slice_axis(a, -1, 0, n)
    a = ops.scatter_last(a, d)
    return ops.reshape(a, V.shape)


def split_dhsa_features(feat: Tensor) -> tuple:
    """Split the 5C expansion into ``V`` (C), ``F_QK1`` (2C), ``F_QK2`` (2C)."""
    c5 = feat.shape[-3]
    c = c5 // 5
    return (
        ops.slice_axis(feat, -3, 0, c),
        ops.slice_axis(feat, -3, c, 3 * c),
        ops.slice_axis(feat, -3, 3 * c, 5 * c),
    )


def dhsa_forward(x: Tensor, params: DHSAParams) -> Tensor:
    feat = dynamic_range_conv(x, params)
    v, fqk1, fqk2 = split_dhsa_features(feat)
    return ops.conv2d_pointwise(histogram_attention(v, fqk1, fqk2, params), params.out_pw)


def init_dhsa(channels: int, heads: int, bins: int, rng: np.random.Generator, dtype=np.float32,
              **options) -> DHSAParams:
    """Random DHSA parameters; pointwise weights use fan-in scaling."""
    shp = DHSAParams.shapes(channels)
    return DHSAParams(
        ln_gain=Tensor(np.ones(shp["ln_gain"], dtype)),
        ln_bias=Tensor(np.zeros(shp["ln_bias"], dtype)),
        expand_pw=Tensor((rng.standard_normal(shp["expand_pw"]) / math.sqrt(channels)).astype(dtype)),
        expand_dw=Tensor((rng.standard_normal(shp["expand_dw"]) / 3.0).astype(dtype)),
        out_pw=Tensor((rng.standard_normal(shp["out_pw"]) / math.sqrt(channels)).astype(dtype)),
        heads=heads, bins=bins, **options,
    )
