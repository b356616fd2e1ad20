"""Whole-image restoration with reflect padding to the model's size multiple."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, no_grad
from .model import MIN_EXTENT, ModelConfig, ParameterStore, model_forward

MULTIPLE = 8


def pad_to_multiple(img: np.ndarray, multiple: int = MULTIPLE, minimum: int = MIN_EXTENT) -> tuple:
    """Reflect-pad bottom/right so H and W are multiples of ``multiple`` and at least ``minimum``.

    Returns ``(padded, (h, w))`` with the original extent for cropping.
    """
    h, w = img.shape[-2:]
    ph, pw = max(-h % multiple, minimum - h), max(-w % multiple, minimum - w)
    if ph == 0 and pw == 0:
        return img, (h, w)
    # reflect needs pad < extent; fall back to symmetric for tiny images
    mode = "reflect" if ph < h and pw < w else "symmetric"
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode=mode), (h, w)


def restore(images, config: ModelConfig, store: ParameterStore, batch: int = 8) -> list:
    """Run the model over a list of ``[3, H, W]`` arrays of any size; outputs are clipped to ``[0, 1]``."""
    dtype = store["embed.w"].dtype
    out = [None] * len(images)
    groups: dict = {}
    for i, img in enumerate(images):
        groups.setdefault(tuple(np.shape(img)), []).append(i)
    with no_grad():
        for idx in groups.values():
            for k in range(0, len(idx), batch):
                chunk = idx[k:k + batch]
                padded = [pad_to_multiple(np.asarray(images[i], dtype=dtype)) for i in chunk]
                h, w = padded[0][1]
                x = Tensor(np.stack([p for p, _ in padded]), dtype=dtype)
                y = model_forward(x, config, store).data[..., :h, :w]
                for j, i in enumerate(chunk):
                    out[i] = np.clip(y[j], 0.0, 1.0)
    return out
