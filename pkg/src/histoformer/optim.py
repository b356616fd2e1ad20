"""AdamW with decoupled weight decay and a constant-then-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError
from .model import ParameterStore


@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 4
    patch_size: int = 64
    lr_init: float = 3e-4
    lr_final: float = 1e-6
    warm_iters: int = 0  # constant lr_init before annealing starts
    weight_decay: float = 1e-4
    alpha: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    val_every: int = 100
    train_pairs: int = 200
    val_pairs: int = 32
    two_stage: bool = False  # 48px patches for the first half, then patch_size

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.patch_size <= 0 or self.patch_size % 8:
            raise ConfigError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError(f"need 0 < lr_final <= lr_init, got {self.lr_final} and {self.lr_init}")
        if not 0 <= self.warm_iters <= self.iterations:
            raise ConfigError(f"warm_iters must lie in [0, iterations], got {self.warm_iters}")
        if self.weight_decay < 0 or self.alpha < 0:
            raise ConfigError("weight_decay and alpha must be >= 0")
        if self.checkpoint_every < 0 or self.val_every < 0:
            raise ConfigError("cadences must be >= 0")
        if self.train_pairs <= 0 or self.val_pairs <= 0:
            raise ConfigError("pair counts must be positive")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """``lr_init`` during the warm span, then cosine annealing that hits ``lr_final`` on the last step."""
    if step < cfg.warm_iters:
        return cfg.lr_init
    span = cfg.iterations - 1 - cfg.warm_iters
    if span <= 0:  # the only post-warm step is the last one
        return cfg.lr_final
    progress = min(max((step - cfg.warm_iters) / span, 0.0), 1.0)
    if progress == 1.0:
        return cfg.lr_final
    return cfg.lr_final + (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * progress)) / 2.0


def adamw_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 1e-4) -> ParameterStore:
    """One in-place AdamW update of every parameter from its ``.grad``.

    Weight decay is applied to the weights directly (``p -= lr * wd * p``),
    not folded into the gradient.  Raises StateError if no gradient exists.
    """
    store.check_grads()
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m, v = store.moments.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        store.moments[name] = (m.astype(p.dtype), v.astype(p.dtype))
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - lr * weight_decay * p.data - lr * update).astype(p.dtype)
    return store
