"""Wall-time and peak-memory benchmark of every primitive and block.

Each cell runs forward plus backward on a fresh tape, ``repeats`` times,
and reports the median.  Peak memory is the tracemalloc high-water mark of
one extra (untimed) run, since tracing slows numpy allocation down.
"""

from __future__ import annotations

import math
import re
import statistics
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import dhsa_forward, histogram_attention, init_dhsa
from .autograd import Tape, Tensor, backward
from .errors import ConfigError
from .feedforward import dgff_forward, init_dgff
from .losses import total_loss

COLUMNS = ("name", "kind", "channels", "height", "width", "pixels", "median_s", "min_s", "peak_mib", "repeats",
           "loops")
MIN_REPEATS = 5
MIN_SAMPLE_S = 2e-3  # each timed sample loops the case until it spans at least this long


@dataclass
class BenchRow:
    name: str
    kind: str
    channels: int
    height: int
    width: int
    median_s: float
    min_s: float
    peak_mib: float
    repeats: int
    loops: int = 1

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}

    def tsv(self) -> str:
        return "\t".join(
            f"{v:.6g}" if isinstance(v, float) else str(v) for v in (getattr(self, c) for c in COLUMNS)
        )


def parse_grid(spec: str) -> list:
    """``"16,32,64"`` or ``"16x32,64x64"`` -> list of ``(H, W)``."""
    sizes = []
    for tok in (t.strip() for t in spec.split(",")):
        if not tok:
            continue
        m = re.fullmatch(r"(\d+)(?:x(\d+))?", tok)
        if not m:
            raise ConfigError(f"bad grid entry {tok!r}; use sizes like 16,32 or 16x24")
        h = int(m.group(1))
        w = int(m.group(2) or h)
        if h < 4 or w < 4 or h % 4 or w % 4:
            raise ConfigError(f"grid size {h}x{w} must be a multiple of 4 and at least 4")
        sizes.append((h, w))
    if not sizes:
        raise ConfigError("empty benchmark grid")
    return sizes


def _cases(c: int, h: int, w: int, bins: int, rng: np.random.Generator) -> dict:
    """name -> (kind, factory returning (fn, inputs))."""

    def t(*shape):
        return Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)

    x = lambda: t(c, h, w)  # noqa: E731
    n = h * w
    p = lambda: init_dhsa(c, 1, min(bins, n), rng)  # noqa: E731
    return {
        "add": ("op", lambda: (ops.add, [x(), x()])),
        "sub": ("op", lambda: (ops.sub, [x(), x()])),
        "mul": ("op", lambda: (ops.mul, [x(), x()])),
        "div": ("op", lambda: (ops.div, [x(), Tensor(2 + rng.random((c, h, w)).astype(np.float32))])),
        "neg": ("op", lambda: (ops.neg, [x()])),
        "abs": ("op", lambda: (ops.abs, [x()])),
        "sqrt": ("op", lambda: (ops.sqrt, [Tensor(1 + rng.random((c, h, w)).astype(np.float32), requires_grad=True)])),
        "sum": ("op", lambda: (lambda a: ops.sum(a, axis=0), [x()])),
        "mean": ("op", lambda: (lambda a: ops.mean(a, axis=0), [x()])),
        "reshape": ("op", lambda: (lambda a: ops.reshape(a, (c, n)), [x()])),
        "transpose": ("op", lambda: (lambda a: ops.transpose(a, (0, 2, 1)), [x()])),
        "concat": ("op", lambda: (lambda a, b: ops.concat([a, b], axis=0), [x(), x()])),
        "slice_axis": ("op", lambda: (lambda a: ops.slice_axis(a, 0, 0, max(c // 2, 1)), [x()])),
        "split": ("op", lambda: (lambda a: ops.split(a, 2, axis=0)[0], [t(2 * c, h, w)])),
        "matmul": ("op", lambda: (ops.matmul, [t(bins, n // bins * c), t(n // bins * c, bins)])),
        "softmax_last": ("op", lambda: (ops.softmax_last, [t(c, n)])),
        "argsort_last": ("op", lambda: (lambda a: ops.gather_last(a, ops.argsort_last(a)), [t(c, n)])),
        "gather_last": ("op", lambda: (lambda a: ops.gather_last(a, ops.PermutationIndex(
            np.argsort(rng.random((c, n)), axis=-1))), [t(c, n)])),
        "scatter_last": ("op", lambda: (lambda a: ops.scatter_last(a, ops.PermutationIndex(
            np.argsort(rng.random((c, n)), axis=-1))), [t(c, n)])),
        "pad_edge_last": ("op", lambda: (lambda a: ops.pad_edge_last(a, 7), [t(c, n)])),
        "conv2d_depthwise": ("op", lambda: (lambda a, k: ops.conv2d_depthwise(a, k), [x(), t(c, 3, 3)])),
        "conv2d_depthwise_dil2": ("op", lambda: (lambda a, k: ops.conv2d_depthwise(a, k, 2), [x(), t(c, 3, 3)])),
        "conv2d_pointwise": ("op", lambda: (ops.conv2d_pointwise, [x(), t(c, c)])),
        "conv2d": ("op", lambda: (ops.conv2d, [x(), t(c, c, 3, 3)])),
        "pixel_shuffle": ("op", lambda: (lambda a: ops.pixel_shuffle(a, 2), [t(4 * c, h // 2, w // 2)])),
        "pixel_unshuffle": ("op", lambda: (lambda a: ops.pixel_unshuffle(a, 2), [x()])),
        "avg_pool2d": ("op", lambda: (lambda a: ops.avg_pool2d(a, 2, 2), [x()])),
        "mish": ("op", lambda: (ops.mish, [x()])),
        "layer_norm_channels": ("op", lambda: (ops.layer_norm_channels, [x(), t(c), t(c)])),
        "l1_plus_correlation": ("op", lambda: (total_loss, [t(3, h, w), Tensor(rng.random((3, h, w)).astype(np.float32))])),
        "histogram_attention": ("block", lambda: (
            lambda v, a, b, prm=p(): histogram_attention(v, a, b, prm), [x(), t(2 * c, h, w), t(2 * c, h, w)])),
        "dhsa": ("block", lambda: (lambda a, prm=p(): dhsa_forward(a, prm), [x()])),
        "dgff": ("block", lambda: (lambda a, prm=init_dgff(c, 2.667, rng): dgff_forward(a, prm), [x()])),
    }


def _run_once(fn, inputs) -> None:
    with Tape() as tape:
        out = fn(*inputs)
        loss = ops.sum(out)
    backward(tape, loss, accumulate=False)


def run_bench(grid: list, channels: int = 16, bins: int = 16, repeats: int = MIN_REPEATS,
              only: list | None = None, seed: int = 0) -> list:
    if repeats < MIN_REPEATS:
        raise ConfigError(f"at least {MIN_REPEATS} repeats are required, got {repeats}")
    if channels < 2 or channels % 2:
        raise ConfigError(f"channels must be even and >= 2, got {channels}")
    rng = np.random.default_rng(seed)
    rows = []
    for h, w in grid:
        for name, (kind, factory) in _cases(channels, h, w, bins, rng).items():
            if only and name not in only:
                continue
            fn, inputs = factory()
            t0 = time.perf_counter()
            _run_once(fn, inputs)  # warm-up, also sizes the loop
            loops = max(1, math.ceil(MIN_SAMPLE_S / max(time.perf_counter() - t0, 1e-9)))
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                for _ in range(loops):
                    _run_once(fn, inputs)
                times.append((time.perf_counter() - t0) / loops)
            tracemalloc.start()
            _run_once(fn, inputs)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            rows.append(BenchRow(name, kind, channels, h, w, statistics.median(times), min(times),
                                 peak / 2 ** 20, repeats, loops))
    return rows


def scaling_slope(rows: list, name: str) -> float:
    """Least-squares slope of log(median time) against log(pixels) for one row name."""
    pts = [(math.log(r.pixels), math.log(r.median_s)) for r in rows if r.name == name]
    if len(pts) < 2:
        return math.nan
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def format_table(rows: list) -> str:
    return "\n".join(["\t".join(COLUMNS)] + [r.tsv() for r in rows]) + "\n"
