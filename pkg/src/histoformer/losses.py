"""Training objective (L1 + correlation) and full-reference quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ConfigError, DimensionError

PEARSON_EPS = 1e-6  # added to the product of the two root sums of squares
PSNR_CAP = 100.0


@dataclass
class LossConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _image_axes(x) -> tuple:
    # one correlation per image: the last three axes form the sequence
    return tuple(range(max(x.ndim - 3, 0), x.ndim))


def l1_loss(hq, gt) -> Tensor:
    """Mean absolute difference over every element."""
    hq, gt = ops._pair(hq, gt)
    _same_shape(hq, gt)
    return ops.mean(ops.abs(ops.sub(hq, gt)))


def pearson(hq, gt, flags: list | None = None) -> Tensor:
    """Pearson correlation per image, averaged over any leading batch axes.

    A zero-variance image yields a correlation of 0 (and ``"degenerate"`` is
    appended to ``flags`` when given) instead of NaN.
    """
    hq, gt = ops._pair(hq, gt)
    _same_shape(hq, gt)
    if hq.size < 2:
        raise DimensionError("correlation needs at least two elements")
    axes = _image_axes(hq)
    hc = ops.sub(hq, ops.mean(hq, axis=axes, keepdims=True))
    gc = ops.sub(gt, ops.mean(gt, axis=axes, keepdims=True))
    var_h = ops.sum(ops.mul(hc, hc), axis=axes, keepdims=True)
    var_g = ops.sum(ops.mul(gc, gc), axis=axes, keepdims=True)
    degenerate = (var_h.data == 0) | (var_g.data == 0)
    if degenerate.any():
        if flags is not None:
            flags.append("degenerate")
        # keep sqrt away from zero; the numerator is exactly zero there anyway
        var_h = ops.add(var_h, np.where(var_h.data == 0, 1.0, 0.0).astype(var_h.dtype))
        var_g = ops.add(var_g, np.where(var_g.data == 0, 1.0, 0.0).astype(var_g.dtype))
    cov = ops.sum(ops.mul(hc, gc), axis=axes, keepdims=True)
    denom = ops.add(ops.mul(ops.sqrt(var_h), ops.sqrt(var_g)), PEARSON_EPS)
    return ops.mean(ops.div(cov, denom))


def correlation_loss(hq, gt) -> Tensor:
    """``(1 - rho) / 2``, in ``[0, 1]``."""
    return ops.mul(ops.sub(1.0, pearson(hq, gt)), 0.5)


def total_loss(hq, gt, cfg: LossConfig | float = 1.0) -> Tensor:
    alpha = cfg.alpha if isinstance(cfg, LossConfig) else float(cfg)
    rec = l1_loss(hq, gt)
    if alpha == 0:
        return rec
    return ops.add(rec, ops.mul(correlation_loss(hq, gt), alpha))


# ------------------------------------------------------------------ metrics

def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``[..., 3, H, W]`` image in ``[0, 1]``."""
    return 0.299 * img[..., 0, :, :] + 0.587 * img[..., 1, :, :] + 0.114 * img[..., 2, :, :]


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM on the luma channel with a Gaussian window (valid region only).

    Images smaller than the window shrink it to the largest odd size that fits.
    """
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    if a.ndim >= 3 and a.shape[-3] == 3:
        a, b = luma(a), luma(b)
    window = min(window, *a.shape[-2:])
    window -= 1 - window % 2
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
