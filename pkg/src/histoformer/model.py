"""Four-stage encoder-decoder built from histogram transformer blocks."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .attention import BRANCHES, SCALES, SORT_ORDERS, DHSAParams, dhsa_forward
from .autograd import Tensor
from .errors import ConfigError, StateError
from .feedforward import DGFFParams, dgff_forward

# Feed-forward variants selectable by name; only the dual-scale gated one ships.
FEED_FORWARD = {"dgff": (DGFFParams, dgff_forward)}

STAGES = 4
MIN_EXTENT = 16  # smallest input side the four-stage pyramid accepts


@dataclass
class ModelConfig:
    depths: tuple = (4, 4, 6, 8)
    channels: int = 36
    heads: tuple = (1, 2, 4, 8)
    expansion: float = 2.667
    bins: tuple | None = None  # per stage; None means "stage channel count"
    refinement_depth: int | None = None  # None means depths[0]
    skip_fusion: str = "concat"
    scale: str = "heads"
    sort_order: str = "hv"
    branches: str = "both"
    feed_forward: str = "dgff"
    ffn_shuffle: int = 2
    ffn_dilation: int = 2
    alpha: float = 1.0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if self.bins is not None:
            bins = (self.bins,) * STAGES if isinstance(self.bins, int) else self.bins
            self.bins = tuple(int(b) for b in bins)
        self.validate()

    def validate(self):
        if len(self.depths) != STAGES or len(self.heads) != STAGES:
            raise ConfigError("depths and heads need one entry per stage (4)")
        if self.bins is not None and len(self.bins) != STAGES:
            raise ConfigError("bins needs one entry per stage (4)")
        if min(self.depths) < 1 or min(self.heads) < 1 or self.channels < 2:
            raise ConfigError("depths, heads and channels must be positive")
        if self.bins is not None and min(self.bins) < 1:
            raise ConfigError("bins must be positive")
        if self.channels % 2:
            raise ConfigError(f"channels must be even, got {self.channels}")
        for i, h in enumerate(self.heads):
            if self.stage_channels(i) % h:
                raise ConfigError(f"stage {i + 1}: {self.stage_channels(i)} channels not divisible by {h} heads")
        if self.expansion <= 0:
            raise ConfigError("expansion factor must be positive")
        if self.refinement_depth is not None and self.refinement_depth < 0:
            raise ConfigError("refinement depth must be >= 0")
        if self.skip_fusion not in ("concat", "add"):
            raise ConfigError(f"unknown skip fusion {self.skip_fusion!r}")
        if self.scale not in SCALES or self.sort_order not in SORT_ORDERS or self.branches not in BRANCHES:
            raise ConfigError("unknown attention option")
        if self.feed_forward not in FEED_FORWARD:
            raise ConfigError(f"unknown feed-forward variant {self.feed_forward!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")

    def stage_channels(self, stage: int) -> int:
        return self.channels * 2 ** min(stage, 3)

    def stage_bins(self, stage: int) -> int:
        return self.stage_channels(stage) if self.bins is None else self.bins[stage]

    @property
    def refinement(self) -> int:
        return self.depths[0] if self.refinement_depth is None else self.refinement_depth

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale default: one block per stage, 16 channels, 16 bins."""
        base = dict(depths=(1, 1, 1, 1), channels=16, heads=(1, 1, 2, 2), bins=16)
        base.update(overrides)
        return cls(**base)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ParameterStore:
    """Ordered name -> tensor map with gradients on the tensors and AdamW moments."""

    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    moments: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def tensors(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def check_grads(self):
        missing = [n for n, t in self.params.items() if t.grad is None]
        if len(missing) == len(self.params):
            raise StateError("no gradients populated; call backward before stepping")
        for name in missing:
            self.params[name].grad = np.zeros_like(self.params[name].data)

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(step=self.step)
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
        out.moments = {k: (m.astype(dtype), v.astype(dtype)) for k, (m, v) in self.moments.items()}
        return out

    def prefixed(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


# ------------------------------------------------------------------ layout

def block_names(config: ModelConfig) -> list:
    """``(prefix, stage)`` of every transformer block in execution order."""
    names = []
    for s in range(STAGES):
        names += [(f"enc{s + 1}.{b}.", s) for b in range(config.depths[s])]
    for s in (2, 1, 0):
        names += [(f"dec{s + 1}.{b}.", s) for b in range(config.depths[s])]
    names += [(f"refine.{b}.", 0) for b in range(config.refinement)]
    return names


def _normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(dtype)


def init_store(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Deterministic parameter initialisation; the output head starts at zero."""
    rng = np.random.default_rng(seed)
    st = ParameterStore()
    c = config.channels
    st.add("embed.w", _normal(rng, (c, 3, 3, 3), 27, dtype))
    ffn_cls = FEED_FORWARD[config.feed_forward][0]
    blocks = dict(block_names(config))
    order = [p for p, _ in block_names(config)]

    def add_blocks(prefix_start):
        for p in order:
            if not p.startswith(prefix_start):
                continue
            ch = config.stage_channels(blocks[p])
            for name, shape in DHSAParams.shapes(ch).items():
                st.add(p + "attn." + name, _init_like(name, shape, rng, dtype))
            for name, shape in ffn_cls.shapes(ch, config.expansion, config.ffn_shuffle).items():
                st.add(p + "ffn." + name, _init_like(name, shape, rng, dtype))

    for s in range(STAGES):
        ch = config.stage_channels(s)
        if s > 0:
            prev = config.stage_channels(s - 1)
            st.add(f"down{s}.w", _normal(rng, (ch, 4 * prev), 4 * prev, dtype))
            st.add(f"crude{s + 1}.pw", _normal(rng, (ch, c), c, dtype))
            st.add(f"crude{s + 1}.dw", _normal(rng, (ch, 3, 3), 9, dtype))
        add_blocks(f"enc{s + 1}.")
    for s in (2, 1, 0):
        ch = config.stage_channels(s)
        st.add(f"up{s + 1}.w", _normal(rng, (4 * ch, 2 * ch), 2 * ch, dtype))
        if config.skip_fusion == "concat":
            st.add(f"fuse{s + 1}.w", _normal(rng, (ch, 2 * ch), 2 * ch, dtype))
        add_blocks(f"dec{s + 1}.")
    add_blocks("refine.")
    st.add("out.w", np.zeros((3, c, 3, 3), dtype))
    return st


def _init_like(name: str, shape: tuple, rng, dtype):
    if name == "ln_gain":
        return np.ones(shape, dtype)
    if name == "ln_bias":
        return np.zeros(shape, dtype)
    if len(shape) == 3:  # depthwise kernel
        return _normal(rng, shape, shape[1] * shape[2], dtype)
    return _normal(rng, shape, shape[1], dtype)


def param_count(config: ModelConfig) -> int:
    return init_store(config, seed=0).num_parameters()


# ------------------------------------------------------------- components

def attention_params(store, prefix: str, config: ModelConfig, stage: int, pixels: int) -> DHSAParams:
    p = store.prefixed(prefix + "attn.") if isinstance(store, ParameterStore) else store
    return DHSAParams(
        **{k: p[k] for k in DHSAParams.shapes(1)},
        heads=config.heads[stage],
        bins=min(config.stage_bins(stage), pixels),
        scale=config.scale, sort_order=config.sort_order, branches=config.branches,
    )


def ffn_params(store, prefix: str, config: ModelConfig):
    cls = FEED_FORWARD[config.feed_forward][0]
    p = store.prefixed(prefix + "ffn.") if isinstance(store, ParameterStore) else store
    return cls(**{k: p[k] for k in cls.shapes(2, 1.0)}, shuffle=config.ffn_shuffle, dilation=config.ffn_dilation)


def htb_forward(F: Tensor, attn: DHSAParams, ffn) -> Tensor:
    """Pre-norm residual block: attention sub-step then feed-forward sub-step."""
    F = ops.add(F, dhsa_forward(ops.layer_norm_channels(F, attn.ln_gain, attn.ln_bias), attn))
    ff = next(fn for cls, fn in FEED_FORWARD.values() if isinstance(ffn, cls))
    return ops.add(F, ff(ops.layer_norm_channels(F, ffn.ln_gain, ffn.ln_bias), ffn))


def downsample(x: Tensor, w: Tensor) -> Tensor:
    """Pixel-unshuffle by 2 (C -> 4C) then 1x1 conv to 2C."""
    h, wd = x.shape[-2:]
    if h % 2 or wd % 2:
        raise ConfigError(f"downsample needs even extents, got {h}x{wd}")
    return ops.conv2d_pointwise(ops.pixel_unshuffle(x, 2), w)


def upsample(x: Tensor, w: Tensor) -> Tensor:
    """1x1 conv 2C -> 4C then pixel-shuffle by 2 (4C -> C)."""
    return ops.pixel_shuffle(ops.conv2d_pointwise(x, w), 2)


def crude_skip(embedded: Tensor, stage: int, pw: Tensor, dw: Tensor) -> Tensor:
    """Pool the embedded input down to ``stage`` (1-based, >= 2), project, depthwise 3x3."""
    if stage < 2 or stage > STAGES:
        raise ConfigError(f"crude skip starts after the first stage; got stage {stage}")
    x = embedded
    for _ in range(stage - 1):
        x = ops.avg_pool2d(x, 2, 2)
    return ops.conv2d_depthwise(ops.conv2d_pointwise(x, pw), dw)


def _run_blocks(x: Tensor, store: ParameterStore, config: ModelConfig, prefix: str, stage: int, depth: int):
    pixels = x.shape[-1] * x.shape[-2]
    for b in range(depth):
        p = f"{prefix}.{b}."
        x = htb_forward(x, attention_params(store, p, config, stage, pixels), ffn_params(store, p, config))
    return x


def _fuse(x: Tensor, skip: Tensor, store: ParameterStore, config: ModelConfig, stage: int) -> Tensor:
    if config.skip_fusion == "add":
        return ops.add(x, skip)
    return ops.conv2d_pointwise(ops.concat([x, skip], axis=-3), store[f"fuse{stage + 1}.w"])


def model_forward(I_lq, config: ModelConfig, store: ParameterStore) -> Tensor:
    """Restore ``[..., 3, H, W]`` images; H and W must be multiples of 8 and at least 16."""
    if not isinstance(I_lq, Tensor):
        I_lq = Tensor(I_lq, dtype=store["embed.w"].dtype)
    h, w = I_lq.shape[-2:]
    if I_lq.shape[-3] != 3:
        raise ConfigError(f"expected 3 input channels, got {I_lq.shape[-3]}")
    if h % 8 or w % 8:
        raise ConfigError(
            f"input {h}x{w} must be divisible by 8; reflect-pad by "
            f"({-h % 8}, {-w % 8}) rows/cols"
        )
    if h < MIN_EXTENT or w < MIN_EXTENT:
        # the 1/8 bottleneck needs two pixels per axis for reflect padding
        raise ConfigError(f"input {h}x{w} is smaller than the {MIN_EXTENT}-pixel minimum")
    embedded = ops.conv2d(I_lq, store["embed.w"])
    skips = []
    x = embedded
    for s in range(STAGES):
        if s > 0:
            x = downsample(x, store[f"down{s}.w"])
            x = ops.add(x, crude_skip(embedded, s + 1, store[f"crude{s + 1}.pw"], store[f"crude{s + 1}.dw"]))
        x = _run_blocks(x, store, config, f"enc{s + 1}", s, config.depths[s])
        skips.append(x)
    for s in (2, 1, 0):
        x = upsample(x, store[f"up{s + 1}.w"])
        x = _fuse(x, skips[s], store, config, s)
        x = _run_blocks(x, store, config, f"dec{s + 1}", s, config.depths[s])
    x = _run_blocks(x, store, config, "refine", 0, config.refinement)
    return ops.add(I_lq, ops.conv2d(x, store["out.w"]))


def output_projection_names(store: ParameterStore) -> list:
    """Parameters whose zeroing turns every residual branch into identity."""
    return [n for n in store if n.endswith("attn.out_pw") or n.endswith("ffn.out_pw") or n == "out.w"]
