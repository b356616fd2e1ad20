"""Differentiable primitives.

Every function takes :class:`~histoformer.autograd.Tensor` operands (plain
arrays and Python scalars are accepted as constants) and returns a Tensor.
Spatial operators work on ``[..., C, H, W]`` so a leading batch axis is
optional.  All spatial convolutions use reflect padding and preserve the
spatial extent.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, default_dtype, note_permutation, record
from .errors import ConfigError, DimensionError, NumericError, PermutationError

__all__ = [
    "add", "sub", "mul", "div", "neg", "abs", "sqrt", "sum", "mean",
    "reshape", "transpose", "concat", "slice_axis", "split",
    "matmul", "softmax_last", "argsort_last", "gather_last", "scatter_last",
    "pad_edge_last", "conv2d_depthwise", "conv2d_pointwise", "conv2d",
    "pixel_shuffle", "pixel_unshuffle", "mish", "layer_norm_channels",
    "avg_pool2d", "PermutationIndex",
]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return record("div", (a, b), out, vjp)


def neg(x) -> Tensor:
    x = _lift(x)
    return record("neg", (x,), -x.data, lambda g: (-g,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _lift(x)
    s = np.sign(x.data)
    return record("abs", (x,), np.abs(x.data), lambda g: (g * s,))


def sqrt(x) -> Tensor:
    x = _lift(x)
    out = np.sqrt(x.data)
    return record("sqrt", (x,), out, lambda g: (g / (2 * out),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _lift(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), vjp)


# -------------------------------------------------------------------- layout

def reshape(x, shape) -> Tensor:
    x = _lift(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return record("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", tuple(xs), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _lift(x)
    shape = x.shape
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record("slice", (x,), np.ascontiguousarray(x.data[index]), vjp)


def split(x, parts: int, axis: int = 0) -> list:
    n = x.shape[axis]
    if n % parts:
        raise ConfigError(f"axis of extent {n} cannot be split into {parts} equal parts")
    step = n // parts
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(parts)]


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record("matmul", (a, b), ad @ bd, vjp)


def softmax_last(x) -> Tensor:
    x = _lift(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), y, vjp)


# ---------------------------------------------------------------- permutations

class PermutationIndex:
    """Per-slice permutation of the last axis.

    Instances built by :func:`argsort_last` are trusted; wrapping a raw array
    validates that every slice is a permutation of ``range(n)``.
    """

    __slots__ = ("indices",)

    def __init__(self, indices, _trusted: bool = False):
        idx = np.asarray(indices)
        if not _trusted:
            if idx.dtype.kind not in "iu":
                raise PermutationError(f"permutation indices must be integers, got {idx.dtype}")
            n = idx.shape[-1]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise PermutationError(f"index out of range [0, {n})")
            if not np.array_equal(np.sort(idx, axis=-1), np.broadcast_to(np.arange(n), idx.shape)):
                raise PermutationError("index slice is not a permutation")
        self.indices = np.ascontiguousarray(idx, dtype=np.intp)

    @property
    def shape(self):
        return self.indices.shape

    def inverse(self) -> "PermutationIndex":
        inv = np.empty_like(self.indices)
        np.put_along_axis(inv, self.indices, np.broadcast_to(np.arange(self.indices.shape[-1]), self.indices.shape), axis=-1)
        return PermutationIndex(inv, _trusted=True)

    def tile(self, reps: int, axis: int) -> "PermutationIndex":
        """Repeat the index block ``reps`` times along ``axis``."""
        return PermutationIndex(np.concatenate([self.indices] * reps, axis=axis), _trusted=True)

    @classmethod
    def identity(cls, shape) -> "PermutationIndex":
        return cls(np.broadcast_to(np.arange(shape[-1]), shape).copy(), _trusted=True)

    def __repr__(self):
        return f"PermutationIndex(shape={self.shape})"


def _indices(p, x_shape, what: str) -> np.ndarray:
    if isinstance(p, PermutationIndex):
        idx = p.indices
    else:
        idx = PermutationIndex(p).indices
    if idx.shape != tuple(x_shape):
        raise DimensionError(f"{what}: index shape {idx.shape} does not match tensor shape {tuple(x_shape)}")
    return idx


def _sort_key32(data: np.ndarray, ascending: bool) -> np.ndarray:
    """Order-preserving map of float32 values onto uint32 (-0.0 folded onto +0.0)."""
    bits = (data + np.float32(0)).view(np.uint32)
    key = np.where(bits >> 31, ~bits, bits | np.uint32(0x80000000))
    return key if ascending else ~key


def argsort_last(x, ascending: bool = True) -> PermutationIndex:
    """Stable sort order of every last-axis slice (ties keep input order)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = data.shape[-1]
    if data.dtype == np.float32 and n < 2 ** 32:
        # (key, position) packed into one word: an unstable sort of unique
        # words equals a stable sort of the keys, and is several times faster.
        packed = _sort_key32(data, ascending).astype(np.uint64) << np.uint64(32)
        packed |= np.arange(n, dtype=np.uint64)
        packed.sort(axis=-1)
        idx = (packed & np.uint64(0xFFFFFFFF)).astype(np.intp)
    else:
        idx = np.argsort(data if ascending else -data, axis=-1, kind="stable")
    note_permutation(idx)
    return PermutationIndex(idx, _trusted=True)


def _flat(idx: np.ndarray) -> np.ndarray:
    n = idx.shape[-1]
    rows = idx.size // n if n else 0
    return (idx.reshape(rows, n) + (np.arange(rows, dtype=np.intp) * n)[:, None]).reshape(-1)


def gather_last(x, p) -> Tensor:
    """``out[..., j] = x[..., p[..., j]]``."""
    x = _lift(x)
    idx = _flat(_indices(p, x.shape, "gather_last"))

    def vjp(g):
        gx = np.empty_like(g)
        gx.reshape(-1)[idx] = g.reshape(-1)
        return (gx,)

    return record("gather", (x,), x.data.reshape(-1)[idx].reshape(x.shape), vjp)


def scatter_last(x, p) -> Tensor:
    """Inverse of :func:`gather_last`: ``out[..., p[..., j]] = x[..., j]``."""
    x = _lift(x)
    idx = _flat(_indices(p, x.shape, "scatter_last"))
    out = np.empty_like(x.data)
    out.reshape(-1)[idx] = x.data.reshape(-1)
    return record("scatter", (x,), out, lambda g: (g.reshape(-1)[idx].reshape(g.shape),))


def pad_edge_last(x, n: int) -> Tensor:
    """Append ``n`` copies of the final last-axis element."""
    x = _lift(x)
    if n == 0:
        return x
    length = x.shape[-1]
    tail = np.repeat(x.data[..., -1:], n, axis=-1)

    def vjp(g):
        gx = g[..., :length].copy()
        gx[..., -1] += g[..., length:].sum(axis=-1)
        return (gx,)

    return record("pad_edge", (x,), np.concatenate([x.data, tail], axis=-1), vjp)


# ------------------------------------------------------------- convolutions

def _check_reflect(h: int, w: int, pad: int, what: str):
    if pad > h - 1 or pad > w - 1:
        raise ConfigError(f"{what}: spatial extent {h}x{w} too small for reflect padding of {pad}")


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths, mode="reflect")


def _reflect_pad_adjoint(g: np.ndarray, pad: int) -> np.ndarray:
    """Fold the gradient of a reflect-padded array back onto the source."""
    if pad == 0:
        return g
    g = g.copy()
    h = g.shape[-2] - 2 * pad
    w = g.shape[-1] - 2 * pad
    # rows
    g[..., pad + 1:2 * pad + 1, :] += g[..., pad - 1::-1, :][..., :pad, :]
    g[..., h - 1:h - 1 + pad, :] += g[..., pad + h:, :][..., ::-1, :]
    g = g[..., pad:pad + h, :]
    # columns
    g[..., :, pad + 1:2 * pad + 1] += g[..., :, pad - 1::-1][..., :pad]
    g[..., :, w - 1:w - 1 + pad] += g[..., :, pad + w:][..., ::-1]
    return np.ascontiguousarray(g[..., :, pad:pad + w])


def conv2d_depthwise(x, w, dilation: int = 1, bias=None) -> Tensor:
    """Per-channel 2-D correlation with reflect padding.

    ``x``: ``[..., C, H, W]``; ``w``: ``[C, k, k]`` with odd ``k``.
    """
    x, w = _pair(x, w)
    xd, wd = x.data, w.data
    if wd.ndim != 3 or wd.shape[1] != wd.shape[2]:
        raise DimensionError(f"depthwise kernel must be [C,k,k], got {wd.shape}")
    k = wd.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if xd.ndim < 3 or xd.shape[-3] != wd.shape[0]:
        raise DimensionError(f"depthwise conv: input {xd.shape} vs kernel {wd.shape}")
    H, W = xd.shape[-2:]
    pad = dilation * (k - 1) // 2
    _check_reflect(H, W, pad, "conv2d_depthwise")
    xp = _reflect_pad(xd, pad)
    taps = [(a, b) for a in range(k) for b in range(k)]
    out = np.zeros(xd.shape, dtype=np.result_type(xd, wd))
    for a, b in taps:
        out += wd[:, a, b, None, None] * xp[..., a * dilation:a * dilation + H, b * dilation:b * dilation + W]
    inputs = (x, w)
    if bias is not None:
        bias = _lift(bias, x)
        out += bias.data[:, None, None]
        inputs = (x, w, bias)
    lead = tuple(range(xd.ndim - 3))
    letters = "abcdefgh"[:len(lead)]
    spec = f"{letters}cij,{letters}cij->c"

    def vjp(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty_like(wd)
        for a, b in taps:
            win = (Ellipsis, slice(a * dilation, a * dilation + H), slice(b * dilation, b * dilation + W))
            gxp[win] += wd[:, a, b, None, None] * g
            gw[:, a, b] = np.einsum(spec, g, xp[win])
        grads = (_reflect_pad_adjoint(gxp, pad), gw)
        if bias is not None:
            grads += (g.sum(axis=lead + (-2, -1)),)
        return grads

    return record("conv2d_depthwise", inputs, out, vjp)


def conv2d_pointwise(x, w, bias=None) -> Tensor:
    """1x1 convolution: ``[..., Cin, H, W] -> [..., Cout, H, W]`` with ``w: [Cout, Cin]``."""
    x, w = _pair(x, w)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim < 3 or xd.shape[-3] != wd.shape[1]:
        raise DimensionError(f"pointwise conv: input {xd.shape} vs weight {wd.shape}")
    lead = xd.shape[:-3]
    H, W = xd.shape[-2:]
    x2 = xd.reshape(lead + (xd.shape[-3], H * W))
    out = wd @ x2
    inputs = (x, w)
    if bias is not None:
        bias = _lift(bias, x)
        out = out + bias.data[:, None]
        inputs = (x, w, bias)
    out = out.reshape(lead + (wd.shape[0], H, W))

    def vjp(g):
        g2 = g.reshape(lead + (wd.shape[0], H * W))
        gx = (wd.T @ g2).reshape(xd.shape)
        gw = g2 @ np.swapaxes(x2, -1, -2)
        if gw.ndim > 2:
            gw = gw.reshape(-1, *wd.shape).sum(axis=0)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=-1).reshape(-1, wd.shape[0]).sum(axis=0),)
        return grads

    return record("conv2d_pointwise", inputs, out, vjp)


def conv2d(x, w, bias=None) -> Tensor:
    """Dense odd-sized 2-D correlation, ``w: [Cout, Cin, k, k]``, reflect padded."""
    x, w = _pair(x, w)
    xd, wd = x.data, w.data
    if wd.ndim != 4 or xd.ndim < 3 or xd.shape[-3] != wd.shape[1] or wd.shape[2] != wd.shape[3]:
        raise DimensionError(f"conv2d: input {xd.shape} vs weight {wd.shape}")
    cout, cin, k, _ = wd.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    H, W = xd.shape[-2:]
    pad = (k - 1) // 2
    _check_reflect(H, W, pad, "conv2d")
    lead = xd.shape[:-3]
    xp = _reflect_pad(xd, pad)
    taps = [(a, b) for a in range(k) for b in range(k)]
    cols = np.stack([xp[..., a:a + H, b:b + W] for a, b in taps], axis=-3)
    cols = cols.reshape(lead + (cin * k * k, H * W))
    w2 = wd.reshape(cout, cin * k * k)
    out = w2 @ cols
    inputs = (x, w)
    if bias is not None:
        bias = _lift(bias, x)
        out = out + bias.data[:, None]
        inputs = (x, w, bias)
    out = out.reshape(lead + (cout, H, W))

    def vjp(g):
        g2 = g.reshape(lead + (cout, H * W))
        gw = g2 @ np.swapaxes(cols, -1, -2)
        if gw.ndim > 2:
            gw = gw.reshape(-1, cout, cin * k * k).sum(axis=0)
        gcols = (w2.T @ g2).reshape(lead + (cin, k * k, H, W))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, (a, b) in enumerate(taps):
            gxp[..., a:a + H, b:b + W] += gcols[..., t, :, :]
        grads = (_reflect_pad_adjoint(gxp, pad), gw.reshape(wd.shape))
        if bias is not None:
            grads += (g2.sum(axis=-1).reshape(-1, cout).sum(axis=0),)
        return grads

    return record("conv2d", inputs, out, vjp)


# ---------------------------------------------------------------- resampling

def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = a.shape
    a = a.reshape(*lead, c // (r * r), r, r, h, w)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(a.reshape(*lead, c // (r * r), h * r, w * r))


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = a.shape
    a = a.reshape(*lead, c, h // r, r, w // r, r)
    n = len(lead)
    a = a.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(a.reshape(*lead, c * r * r, h // r, w // r))


def pixel_shuffle(x, r: int) -> Tensor:
    """``[..., C*r*r, H, W] -> [..., C, H*r, W*r]``; ``out[c, h*r+i, w*r+j] = in[c*r*r+i*r+j, h, w]``."""
    x = _lift(x)
    if x.shape[-3] % (r * r):
        raise ConfigError(f"pixel_shuffle: {x.shape[-3]} channels not divisible by {r}^2")
    return record("pixel_shuffle", (x,), _shuffle(x.data, r), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x, r: int) -> Tensor:
    x = _lift(x)
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ConfigError(f"pixel_unshuffle: spatial extent {h}x{w} not divisible by {r}")
    return record("pixel_unshuffle", (x,), _unshuffle(x.data, r), lambda g: (_shuffle(g, r),))


def avg_pool2d(x, k: int, stride: int | None = None) -> Tensor:
    x = _lift(x)
    stride = stride or k
    H, W = x.shape[-2:]
    if k > H or k > W:
        raise ConfigError(f"avg_pool2d: window {k} larger than input {H}x{W}")
    ho, wo = (H - k) // stride + 1, (W - k) // stride + 1
    xd = x.data
    out = np.zeros(xd.shape[:-2] + (ho, wo), dtype=xd.dtype)
    windows = [(a, b) for a in range(k) for b in range(k)]
    for a, b in windows:
        out += xd[..., a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
    out /= k * k

    def vjp(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        share = g / (k * k)
        for a, b in windows:
            gx[..., a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += share
        return (gx,)

    return record("avg_pool2d", (x,), out, vjp)


# ---------------------------------------------------------- nonlinearities

def mish(x) -> Tensor:
    """``x * tanh(softplus(x))``."""
    x = _lift(x)
    xd = x.data
    t = np.tanh(np.logaddexp(0, xd))
    out = xd * t

    def vjp(g):
        sig = 0.5 * (1 + np.tanh(0.5 * xd))
        return (g * (t + xd * (1 - t * t) * sig),)

    return record("mish", (x,), out, vjp)


def layer_norm_channels(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalise the channel vector at every pixel, then scale and shift."""
    x = _lift(x)
    gain, bias = _lift(gain, x), _lift(bias, x)
    xd = x.data
    c = xd.shape[-3]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer norm: {c} channels vs gain {gain.shape} / bias {bias.shape}")
    mu = xd.mean(axis=-3, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-3, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data[:, None, None]
    out = xhat * gd + bias.data[:, None, None]
    lead = tuple(range(xd.ndim - 3))

    def vjp(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-3, keepdims=True) - xhat * (gh * xhat).mean(axis=-3, keepdims=True))
        return gx, (g * xhat).sum(axis=lead + (-2, -1)), g.sum(axis=lead + (-2, -1))

    return record("layer_norm", (x, gain, bias), out, vjp)
