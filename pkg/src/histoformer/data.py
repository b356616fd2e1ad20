"""Synthetic weather degradations, procedural clean images and pair datasets.

Particle geometry is drawn row by row from ``numpy.random.default_rng(seed)``,
one row of uniforms per particle, so a denser spec with the same seed covers a
superset of the pixels of a sparser one.  Row layouts:

* snow: ``(y, x, ry, rx)`` -> centre ``(y*H, x*W)``, radii mapped into ``speck_radius``
* rain_fog: ``(y, x, length, angle)`` -> centre, ``streak_length * (0.75 + 0.5 u)``,
  ``streak_angle + 20 (u - 0.5)`` degrees
* raindrop: ``(y, x, r)`` -> centre, radius mapped into ``drop_radius``

All overlays blend toward a target with a single union coverage mask.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import ConfigError
from .ppm import read_ppm, write_ppm

KINDS = ("snow", "rain_fog", "raindrop")
PARTICLE_COLOR = 1.0


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "snow"
    density: float = 4.0  # particles per 1000 pixels
    opacity: float = 0.9
    speck_radius: tuple = (0.6, 1.8)
    streak_length: float = 8.0
    streak_angle: float = 75.0  # degrees from the x axis
    transmission: float = 1.0
    airlight: float = 0.9
    drop_radius: tuple = (2.0, 5.0)
    drop_blur: int = 2
    drop_shift: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if not self.density >= 0:
            raise ConfigError(f"density must be >= 0, got {self.density}")
        if not 0 < self.opacity <= 1:
            raise ConfigError(f"opacity must lie in (0, 1], got {self.opacity}")
        if not 0 < self.transmission <= 1:
            raise ConfigError(f"transmission must lie in (0, 1], got {self.transmission}")
        if not 0 <= self.airlight <= 1:
            raise ConfigError(f"airlight must lie in [0, 1], got {self.airlight}")
        if not self.streak_length > 0:
            raise ConfigError(f"streak length must be positive, got {self.streak_length}")
        for name in ("speck_radius", "drop_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < low <= high, got ({lo}, {hi})")
        if self.drop_blur < 0:
            raise ConfigError(f"drop_blur must be >= 0, got {self.drop_blur}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


def particle_count(density: float, h: int, w: int) -> int:
    return int(math.floor(density * h * w / 1000.0 + 0.5))


def _rows(spec: DegradationSpec, h: int, w: int, width: int) -> np.ndarray:
    n = particle_count(spec.density, h, w)
    return np.random.default_rng(spec.seed).random((n, width))


def _lerp(u, bounds):
    lo, hi = bounds
    return lo + u * (hi - lo)


def snow_specks(spec: DegradationSpec, h: int, w: int) -> np.ndarray:
    """Speck geometry ``[n, 4]`` as ``(cy, cx, ry, rx)`` in pixels."""
    u = _rows(spec, h, w, 4)
    return np.stack([u[:, 0] * h, u[:, 1] * w, _lerp(u[:, 2], spec.speck_radius),
                     _lerp(u[:, 3], spec.speck_radius)], axis=1)


def ellipse_mask(specks: np.ndarray, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    mask = np.zeros((h, w), dtype=bool)
    for cy, cx, ry, rx in specks:
        y0, y1 = max(int(cy - ry), 0), min(int(cy + ry) + 2, h)
        x0, x1 = max(int(cx - rx), 0), min(int(cx + rx) + 2, w)
        dy = (yy[y0:y1, x0:x1] - cy) / ry
        dx = (xx[y0:y1, x0:x1] - cx) / rx
        mask[y0:y1, x0:x1] |= dy * dy + dx * dx <= 1.0
    return mask


def rain_streaks(spec: DegradationSpec, h: int, w: int) -> np.ndarray:
    """Streak geometry ``[n, 4]`` as ``(cy, cx, length, angle_degrees)``."""
    u = _rows(spec, h, w, 4)
    return np.stack([u[:, 0] * h, u[:, 1] * w, spec.streak_length * (0.75 + 0.5 * u[:, 2]),
                     spec.streak_angle + 20.0 * (u[:, 3] - 0.5)], axis=1)


def streak_mask(streaks: np.ndarray, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for cy, cx, length, angle in streaks:
        theta = math.radians(angle)
        t = np.linspace(-0.5, 0.5, max(2, int(2 * length) + 1)) * length
        ys = np.floor(cy - t * math.sin(theta)).astype(int)
        xs = np.floor(cx + t * math.cos(theta)).astype(int)
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        mask[ys[keep], xs[keep]] = True
    return mask


def raindrops(spec: DegradationSpec, h: int, w: int) -> np.ndarray:
    """Drop geometry ``[n, 3]`` as ``(cy, cx, radius)``."""
    u = _rows(spec, h, w, 3)
    return np.stack([u[:, 0] * h, u[:, 1] * w, _lerp(u[:, 2], spec.drop_radius)], axis=1)


def disk_mask(drops: np.ndarray, h: int, w: int) -> np.ndarray:
    ellipses = np.concatenate([drops, drops[:, 2:3]], axis=1)
    return ellipse_mask(ellipses, h, w)


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable box filter over the last two axes with reflect borders."""
    if radius == 0:
        return img.copy()
    k = 2 * radius + 1
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (radius + 1, radius)
        c = np.cumsum(np.pad(out, pad, mode="symmetric"), axis=axis)
        n = out.shape[axis]
        hi = np.take(c, np.arange(k, k + n), axis=axis)
        lo = np.take(c, np.arange(0, n), axis=axis)
        out = (hi - lo) / k
    return out


def _blend(img: np.ndarray, mask: np.ndarray, target, opacity: float) -> np.ndarray:
    return np.where(mask, (1.0 - opacity) * img + opacity * target, img)


def degrade(clean, spec: DegradationSpec):
    """Apply one weather overlay to a ``[3, H, W]`` image in ``[0, 1]``.

    Returns the same container type as ``clean`` (Tensor or ndarray).
    """
    is_tensor = isinstance(clean, Tensor)
    src = clean.data if is_tensor else np.asarray(clean)
    if src.ndim != 3 or src.shape[0] != 3:
        raise ConfigError(f"expected a [3, H, W] image, got shape {src.shape}")
    _, h, w = src.shape
    img = src.astype(np.float64)
    if spec.kind == "snow":
        img = _blend(img, ellipse_mask(snow_specks(spec, h, w), h, w), PARTICLE_COLOR, spec.opacity)
    elif spec.kind == "rain_fog":
        t = spec.transmission
        if t < 1:
            img = img * t + spec.airlight * (1.0 - t)
        img = _blend(img, streak_mask(rain_streaks(spec, h, w), h, w), PARTICLE_COLOR, spec.opacity)
    else:
        mask = disk_mask(raindrops(spec, h, w), h, w)
        if mask.any():
            lens = np.clip(box_blur(img, spec.drop_blur) + spec.drop_shift, 0.0, 1.0)
            img = _blend(img, mask, lens, spec.opacity)
    out = np.clip(img, 0.0, 1.0).astype(src.dtype)
    return Tensor(out) if is_tensor else out


# ----------------------------------------------------------- clean images

def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    grid = rng.random((3, cells + 1, cells + 1))
    ys = np.linspace(0, cells, h, endpoint=False)
    xs = np.linspace(0, cells, w, endpoint=False)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = ys - y0, xs - x0
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    g00 = grid[:, y0][:, :, x0]
    g01 = grid[:, y0][:, :, x0 + 1]
    g10 = grid[:, y0 + 1][:, :, x0]
    g11 = grid[:, y0 + 1][:, :, x0 + 1]
    top = g00 + (g01 - g00) * fx
    bot = g10 + (g11 - g10) * fx
    return top + (bot - top) * fy[:, None]


def procedural_image(rng: np.random.Generator, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Gradient + multi-octave value noise + a few flat rectangles, in ``[0, 1]``."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = math.cos(angle) * xx + math.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    c0, c1 = rng.random(3), rng.random(3)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    noise = sum(_value_noise(rng, h, w, cells) / (2 ** i) for i, cells in enumerate((2, 4, 8, 16)))
    img = 0.6 * img + 0.4 * noise / 1.875
    for _ in range(rng.integers(2, 6)):
        rh, rw = rng.integers(h // 8, h // 2 + 1), rng.integers(w // 8, w // 2 + 1)
        y, x = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        colour = rng.random(3)[:, None, None]
        img[:, y:y + rh, x:x + rw] = 0.3 * img[:, y:y + rh, x:x + rw] + 0.7 * colour
    return np.clip(img, 0.0, 1.0).astype(dtype)


# --------------------------------------------------------- patches, flips

def _unwrap(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def sample_patch(image, size: int, rng: np.random.Generator):
    """Uniform random ``size x size`` crop; a tuple of images shares one crop window."""
    group = image if isinstance(image, tuple) else (image,)
    arrays = [_unwrap(g) for g in group]
    h, w = arrays[0].shape[-2:]
    if size % 8:
        raise ConfigError(f"patch size must be divisible by 8, got {size}")
    if size > h or size > w:
        raise ConfigError(f"patch size {size} exceeds image extents {h}x{w}")
    if any(a.shape[-2:] != (h, w) for a in arrays):
        raise ConfigError("images in a group must share spatial extents")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    crops = tuple(a[..., y:y + size, x:x + size].copy() for a in arrays)
    return crops if isinstance(image, tuple) else crops[0]


def flip_pair(pair: tuple, axis: int) -> tuple:
    """Flip every member along ``axis`` (-1 horizontal, -2 vertical)."""
    return tuple(np.flip(_unwrap(p), axis=axis).copy() for p in pair)


def augment_flips(pair: tuple, rng: np.random.Generator) -> tuple:
    """Random horizontal and vertical flips, identical for every member."""
    do_h, do_v = rng.random(2) < 0.5
    if do_h:
        pair = flip_pair(pair, -1)
    if do_v:
        pair = flip_pair(pair, -2)
    return tuple(_unwrap(p) for p in pair)


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class SynthConfig:
    """Pair-generation settings; each pair draws its own spec within these ranges."""

    size: int = 64
    kinds: tuple = KINDS
    density: tuple = (2.0, 6.0)
    opacity: tuple = (0.7, 1.0)
    transmission: tuple = (0.55, 0.8)
    airlight: tuple = (0.8, 1.0)
    extra: dict = field(default_factory=dict)


def pair_spec(index: int, seed: int, cfg: SynthConfig, rng: np.random.Generator) -> DegradationSpec:
    kind = cfg.kinds[index % len(cfg.kinds)]
    particle_seed = int(rng.integers(0, 2 ** 63))
    spec = DegradationSpec(
        kind=kind,
        density=float(rng.uniform(*cfg.density)),
        opacity=float(rng.uniform(*cfg.opacity)),
        transmission=float(rng.uniform(*cfg.transmission)) if kind == "rain_fog" else 1.0,
        airlight=float(rng.uniform(*cfg.airlight)),
        seed=particle_seed,
    )
    return replace(spec, **cfg.extra) if cfg.extra else spec


def make_pair(index: int, seed: int, cfg: SynthConfig = SynthConfig()) -> tuple:
    """Deterministic ``(clean, degraded)`` pair number ``index`` of stream ``seed``."""
    rng = np.random.default_rng([seed, index])
    clean = procedural_image(rng, cfg.size, cfg.size)
    return clean, degrade(clean, pair_spec(index, seed, cfg, rng))


def generate_pairs(count: int, seed: int, cfg: SynthConfig = SynthConfig(), start: int = 0,
                   workers: int = 1) -> list:
    """Pairs ``start .. start+count-1``; the result does not depend on ``workers``."""
    indices = range(start, start + count)
    if workers <= 1:
        return [make_pair(i, seed, cfg) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: make_pair(i, seed, cfg), indices))


_PAIR_NAME = re.compile(r"^(\d+)\.ppm$")


def save_pair_dir(pairs, root) -> None:
    root = Path(root)
    for sub in ("clean", "degraded"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, (clean, degraded) in enumerate(pairs):
        write_ppm(clean, root / "clean" / f"{i:04d}.ppm")
        write_ppm(degraded, root / "degraded" / f"{i:04d}.ppm")


def load_pair_dir(root) -> list:
    """Read ``<root>/{clean,degraded}/NNNN.ppm`` pairs in numeric order."""
    root = Path(root)
    clean_dir, deg_dir = root / "clean", root / "degraded"
    if not clean_dir.is_dir() or not deg_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain clean/ and degraded/ directories")
    names = sorted((p.name for p in clean_dir.iterdir() if _PAIR_NAME.match(p.name)),
                   key=lambda n: int(_PAIR_NAME.match(n).group(1)))
    pairs = []
    for name in names:
        other = deg_dir / name
        if not other.exists():
            raise FileNotFoundError(f"missing degraded counterpart {other}")
        pairs.append((read_ppm(clean_dir / name), read_ppm(other)))
    return pairs
