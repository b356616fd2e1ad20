"""Finite-difference verification of every differentiable op and of whole blocks.

Each case reduces its output to a scalar with a fixed random weighting (a
plain sum would hide transposition and layout mistakes) and compares the
tape's gradient against central differences.  Inputs that feed sorting are
distinct-valued so small perturbations cannot reorder them.

In 64-bit mode analytic gradients and the difference oracle both run in
float64.  In 32-bit mode the analytic pass runs in float32 while the oracle
stays in float64, and the tolerance is relaxed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import dhsa_forward, init_dhsa
from .autograd import Tensor, same_permutations, grad_check, no_grad, precision, watch_permutations
from .feedforward import dgff_forward, init_dgff
from .model import ModelConfig, htb_forward, init_store, model_forward, attention_params, ffn_params

SCOPES = ("ops", "dhsa", "dgff", "model")
THRESHOLDS = {("ops", 64): 1e-6, ("dhsa", 64): 1e-6, ("dgff", 64): 1e-6, ("model", 64): 1e-5}
THRESHOLD_32 = 1e-3
REL_FLOOR_32 = 1e-2  # 32-bit error denominator floor, as a fraction of the input's largest gradient
EPS = 1e-3  # 4-point stencil: truncation ~eps^4, roundoff ~1e-16/eps
ORDER = 4
MAX_SKIP_FRACTION = 0.1
MODEL_INPUT_COORDS = 128  # of 768 input pixels; keeps the model scope under a minute


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    coords: int
    threshold: float
    seconds: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        # coordinates skipped at sort boundaries must stay a small minority
        return self.max_rel_err <= self.threshold and self.skipped <= MAX_SKIP_FRACTION * (self.coords + self.skipped)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<22} max_rel_err={self.max_rel_err:.3e} "
                f"threshold={self.threshold:.0e} coords={self.coords} skipped={self.skipped} "
                f"time_s={self.seconds:.2f}")


class _Builder:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def normal(self, *shape, scale=1.0):
        return Tensor(self.rng.standard_normal(shape) * scale, dtype=self.dtype)

    def distinct(self, *shape):
        # a shuffled grid with spacing 1/n: sorting order survives any perturbation below 0.5/n
        n = int(np.prod(shape))
        vals = (self.rng.permutation(n) - n / 2) / n * 4
        return Tensor(vals.reshape(shape) + self.rng.uniform(-0.1, 0.1, shape) / n, dtype=self.dtype)

    def away_from_zero(self, *shape):
        x = self.rng.standard_normal(shape)
        return Tensor(np.sign(x) * (0.5 + np.abs(x)), dtype=self.dtype)

    def positive(self, *shape):
        return Tensor(0.5 + self.rng.random(shape), dtype=self.dtype)


def weighted_sum(y: Tensor, seed: int = 1) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(y.shape).astype(y.dtype)
    return ops.sum(ops.mul(y, w))


def op_cases(b: _Builder) -> dict:
    """name -> (function of the inputs, inputs)."""
    W = weighted_sum
    return {
        "add": (lambda x, y: W(ops.add(x, y)), [b.normal(3, 4), b.normal(4)]),
        "sub": (lambda x, y: W(ops.sub(x, y)), [b.normal(2, 3, 4), b.normal(3, 1)]),
        "mul": (lambda x, y: W(ops.mul(x, y)), [b.normal(3, 4), b.normal(3, 4)]),
        "div": (lambda x, y: W(ops.div(x, y)), [b.normal(3, 4), b.away_from_zero(3, 4)]),
        "neg": (lambda x: W(ops.neg(x)), [b.normal(5)]),
        "abs": (lambda x: W(ops.abs(x)), [b.away_from_zero(2, 5)]),
        "sqrt": (lambda x: W(ops.sqrt(x)), [b.positive(2, 5)]),
        "sum": (lambda x: W(ops.sum(x, axis=(0, 2), keepdims=True)), [b.normal(2, 3, 4)]),
        "mean": (lambda x: W(ops.mean(x, axis=1)), [b.normal(2, 3, 4)]),
        "reshape": (lambda x: W(ops.reshape(x, (4, 6))), [b.normal(2, 3, 4)]),
        "transpose": (lambda x: W(ops.transpose(x, (2, 0, 1))), [b.normal(2, 3, 4)]),
        "concat": (lambda x, y: W(ops.concat([x, y], axis=1)), [b.normal(2, 3), b.normal(2, 2)]),
        "slice_axis": (lambda x: W(ops.slice_axis(x, -1, 1, 4)), [b.normal(3, 5)]),
        "split": (lambda x: W(ops.mul(*ops.split(x, 2, axis=0))), [b.normal(4, 3)]),
        "matmul": (lambda x, y: W(ops.matmul(x, y)), [b.normal(2, 3, 4), b.normal(2, 4, 5)]),
        "softmax_last": (lambda x: W(ops.softmax_last(x)), [b.normal(3, 6)]),
        "gather_last": (lambda x: W(ops.gather_last(x, ops.argsort_last(x))), [b.distinct(3, 7)]),
        "scatter_last": (lambda x: W(ops.scatter_last(x, ops.argsort_last(x))), [b.distinct(3, 7)]),
        "pad_edge_last": (lambda x: W(ops.pad_edge_last(x, 3)), [b.normal(3, 7)]),
        "conv2d_depthwise": (lambda x, w, c: W(ops.conv2d_depthwise(x, w, 1, c)),
                             [b.normal(2, 3, 6, 6), b.normal(3, 5, 5), b.normal(3)]),
        "conv2d_depthwise_dil2": (lambda x, w: W(ops.conv2d_depthwise(x, w, 2)),
                                  [b.normal(3, 7, 7), b.normal(3, 3, 3)]),
        "conv2d_pointwise": (lambda x, w, c: W(ops.conv2d_pointwise(x, w, c)),
                             [b.normal(2, 3, 4, 4), b.normal(5, 3), b.normal(5)]),
        "conv2d": (lambda x, w, c: W(ops.conv2d(x, w, c)),
                   [b.normal(2, 3, 5, 5), b.normal(4, 3, 3, 3), b.normal(4)]),
        "pixel_shuffle": (lambda x: W(ops.pixel_shuffle(x, 2)), [b.normal(2, 8, 3, 3)]),
        "pixel_unshuffle": (lambda x: W(ops.pixel_unshuffle(x, 2)), [b.normal(2, 4, 4)]),
        "avg_pool2d": (lambda x: W(ops.avg_pool2d(x, 2, 2)), [b.normal(2, 6, 6)]),
        "mish": (lambda x: W(ops.mish(x)), [b.normal(4, 5, scale=2.0)]),
        "layer_norm_channels": (lambda x, g, c: W(ops.layer_norm_channels(x, g, c)),
                                [b.normal(2, 4, 3, 3), b.normal(4), b.normal(4)]),
    }


def _param_list(params, names):
    return [getattr(params, n) for n in names]


def dhsa_cases(b: _Builder) -> dict:
    out = {}
    for heads, bins, hw in ((1, 4, 6), (2, 4, 8), (2, 16, 4)):
        p = init_dhsa(4, heads, bins, b.rng, b.dtype)
        names = ("expand_pw", "expand_dw", "out_pw")

        def f(x, *w, p=p, names=names):
            for n, t in zip(names, w):
                setattr(p, n, t)
            return weighted_sum(dhsa_forward(x, p))

        out[f"dhsa_h{heads}_b{bins}_{hw}x{hw}"] = (f, [b.distinct(4, hw, hw), *_param_list(p, names)])
    return out


def dgff_cases(b: _Builder) -> dict:
    p = init_dgff(4, 2.667, b.rng, b.dtype)
    p.dw5_bias, p.dw3d_bias = b.normal(p.dw5.shape[0]), b.normal(p.dw3d.shape[0])
    names = ("in_pw", "dw5", "dw3d", "out_pw", "dw5_bias", "dw3d_bias")

    def f(x, *w):
        for n, t in zip(names, w):
            setattr(p, n, t)
        return weighted_sum(dgff_forward(x, p))

    return {"dgff_4x8x8": (f, [b.normal(4, 8, 8), *_param_list(p, names)])}


def htb_case(b: _Builder) -> dict:
    cfg = ModelConfig.tiny(channels=4, heads=(1, 1, 1, 1), bins=4)
    store = init_store(cfg, seed=int(b.rng.integers(1 << 31)), dtype=b.dtype)
    prefix = "enc1.0."
    names = [n for n in store if n.startswith(prefix)]

    def f(x, *w):
        for n, t in zip(names, w):
            store.params[n] = t
        return weighted_sum(htb_forward(x, attention_params(store, prefix, cfg, 0, 64), ffn_params(store, prefix, cfg)))

    return {"htb_4x8x8": (f, [b.distinct(4, 8, 8), *[store[n] for n in names]])}


def _sorts_agree(f, inputs) -> bool:
    """True if ``f`` sorts identically at ``inputs`` and at their float64 casts."""
    with no_grad(), watch_permutations() as low:
        f(*inputs)
    with no_grad(), precision(np.float64), watch_permutations() as high:
        f(*[Tensor(t.data.astype(np.float64)) for t in inputs])
    return same_permutations(low, high)


def model_case(b: _Builder, coords_per_param: int, attempts: int = 20) -> dict:
    cfg = ModelConfig.tiny()
    for _ in range(attempts):
        store = init_store(cfg, seed=int(b.rng.integers(1 << 31)), dtype=b.dtype)
        # the zero-initialised head would block every upstream gradient
        store["out.w"].data = b.rng.standard_normal(store["out.w"].shape).astype(b.dtype) * 0.2
        names = list(store)

        def f(x, *w, store=store, names=names):
            for n, t in zip(names, w):
                store.params[n] = t
            return weighted_sum(model_forward(x, cfg, store))

        x = Tensor(np.clip(b.distinct(3, 16, 16).data / 4 + 0.5, 0, 1), dtype=b.dtype)
        inputs = [x, *[store[n] for n in names]]
        # a 32-bit point is usable only if no internal near-tie sorts differently in 64-bit
        if b.dtype == np.float64 or _sorts_agree(f, inputs):
            return {"model_tiny_3x16x16": (f, inputs, coords_per_param)}
    raise RuntimeError(f"no draw in {attempts} sorts identically at both precisions")


def cases_for(scope: str, builder: _Builder, coords_per_param: int = 2) -> dict:
    if scope == "ops":
        return op_cases(builder)
    if scope == "dhsa":
        return dhsa_cases(builder)
    if scope == "dgff":
        return {**dgff_cases(builder), **htb_case(builder)}
    if scope == "model":
        return model_case(builder, coords_per_param)
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")


def run_gradcheck(scope: str, f64: bool = True, seed: int = 0, coords_per_param: int = 2) -> list:
    """Run every case of ``scope``; returns a list of :class:`CaseResult`."""
    bits = 64 if f64 else 32
    dtype = np.float64 if f64 else np.float32
    threshold = THRESHOLDS[(scope, 64)] if f64 else THRESHOLD_32
    results = []
    with precision(dtype):
        cases = cases_for(scope, _Builder(seed, dtype), coords_per_param)
        for name, case in cases.items():
            f, inputs = case[0], case[1]
            max_coords = case[2] if len(case) > 2 else None
            t0 = time.perf_counter()
            kw = dict(eps=EPS, order=ORDER, oracle_dtype=np.float64, rel_floor=0.0 if f64 else REL_FLOOR_32)
            if max_coords is not None:
                # a sample of input pixels and of every parameter tensor
                _, d_x = grad_check(f, inputs, only=[0], max_coords=MODEL_INPUT_COORDS,
                                    rng=np.random.default_rng(seed + 1), **kw)
                _, d_p = grad_check(f, inputs, max_coords=max_coords, rng=np.random.default_rng(seed),
                                    only=range(1, len(inputs)), **kw)
                details = d_x + d_p
            else:
                _, details = grad_check(f, inputs, **kw)
            results.append(CaseResult(name, max(d[1] for d in details), sum(d[2] for d in details),
                                      threshold, time.perf_counter() - t0, sum(d[3] for d in details)))
    return results
