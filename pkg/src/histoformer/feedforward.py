"""Dual-scale gated feed-forward (DGFF).

expand (1x1) -> pixel shuffle -> split -> {5x5 depthwise, dilated 3x3
depthwise} -> Mish(dilated path) * 5x5 path -> pixel unshuffle -> project (1x1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ConfigError


def hidden_channels(channels: int, expansion: float, shuffle: int = 2) -> int:
    """``floor(expansion * channels)`` rounded up to a multiple of ``2 * shuffle**2``."""
    unit = 2 * shuffle * shuffle
    raw = int(math.floor(expansion * channels))
    return max(unit, -(-raw // unit) * unit)


@dataclass
class DGFFParams:
    ln_gain: Tensor
    ln_bias: Tensor
    in_pw: Tensor  # [hidden, C]
    dw5: Tensor  # [hidden / (2 s^2), 5, 5]
    dw3d: Tensor  # [hidden / (2 s^2), 3, 3]
    out_pw: Tensor  # [C, hidden / 2]
    shuffle: int = 2
    dilation: int = 2
    dw5_bias: Tensor | None = None
    dw3d_bias: Tensor | None = None

    def __post_init__(self):
        hidden = self.in_pw.shape[0]
        unit = 2 * self.shuffle ** 2
        if hidden % unit:
            raise ConfigError(f"expanded width {hidden} not divisible by {unit}")
        branch = hidden // unit
        if self.dw5.shape != (branch, 5, 5) or self.dw3d.shape != (branch, 3, 3):
            raise ConfigError(f"depthwise kernels {self.dw5.shape}, {self.dw3d.shape} do not match {branch} branch channels")

    @staticmethod
    def shapes(channels: int, expansion: float, shuffle: int = 2) -> dict:
        hidden = hidden_channels(channels, expansion, shuffle)
        branch = hidden // (2 * shuffle * shuffle)
        return {
            "ln_gain": (channels,),
            "ln_bias": (channels,),
            "in_pw": (hidden, channels),
            "dw5": (branch, 5, 5),
            "dw3d": (branch, 3, 3),
            "out_pw": (channels, hidden // 2),
        }


def dgff_forward(x: Tensor, params: DGFFParams, gate_out: list | None = None) -> Tensor:
    """Shape-preserving feed-forward; ``gate_out`` (if given) receives the gating map."""
    s = params.shuffle
    h = ops.conv2d_pointwise(x, params.in_pw)
    h = ops.pixel_shuffle(h, s)
    f1, f2 = ops.split(h, 2, axis=-3)
    f1 = ops.conv2d_depthwise(f1, params.dw5, 1, params.dw5_bias)
    f2 = ops.conv2d_depthwise(f2, params.dw3d, params.dilation, params.dw3d_bias)
    gate = ops.mish(f2)
    if gate_out is not None:
        gate_out.append(gate)
    fused = ops.mul(gate, f1)
    return ops.conv2d_pointwise(ops.pixel_unshuffle(fused, s), params.out_pw)


def init_dgff(channels: int, expansion: float, rng: np.random.Generator, dtype=np.float32,
              shuffle: int = 2, dilation: int = 2) -> DGFFParams:
    shp = DGFFParams.shapes(channels, expansion, shuffle)
    hidden = shp["in_pw"][0]
    return DGFFParams(
        ln_gain=Tensor(np.ones(shp["ln_gain"], dtype)),
        ln_bias=Tensor(np.zeros(shp["ln_bias"], dtype)),
        in_pw=Tensor((rng.standard_normal(shp["in_pw"]) / math.sqrt(channels)).astype(dtype)),
        dw5=Tensor((rng.standard_normal(shp["dw5"]) / 5.0).astype(dtype)),
        dw3d=Tensor((rng.standard_normal(shp["dw3d"]) / 3.0).astype(dtype)),
        out_pw=Tensor((rng.standard_normal(shp["out_pw"]) / math.sqrt(hidden / 2)).astype(dtype)),
        shuffle=shuffle, dilation=dilation,
    )
