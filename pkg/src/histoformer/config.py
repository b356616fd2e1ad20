"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment, blank lines are ignored.
Keys are the fields of :class:`ModelConfig`, :class:`TrainConfig` and
:class:`RunConfig`; anything else is rejected with its line number.
Tuples are comma separated (``depths = 1, 1, 1, 1``), booleans are
``true``/``false``, ``none`` clears optional fields.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ParseError
from .model import ModelConfig
from .optim import TrainConfig

PRESETS = {"tiny": ModelConfig.tiny, "paper": ModelConfig}
_OPTIONAL_MODEL = {"bins", "refinement_depth"}
_TUPLE_MODEL = {"depths", "heads", "bins"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "run"
    data_dir: str | None = None  # PPM pair directory replacing synthetic data
    kinds: tuple = ("snow", "rain_fog", "raindrop")
    preset: str = "tiny"


_RUN_KEYS = {"out_dir", "data_dir", "kinds", "preset"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"alpha"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str, default, line: int):
    text = raw.strip()
    try:
        if text.lower() == "none":
            if key in _OPTIONAL_MODEL or key == "data_dir":
                return None
            raise ValueError("none is not allowed here")
        if key in _TUPLE_MODEL or key == "kinds":
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if key == "kinds":
                return tuple(parts)
            ints = tuple(int(p) for p in parts)
            return ints[0] if key == "bins" and len(ints) == 1 else ints
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if isinstance(default, int) or key == "refinement_depth":
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except (ValueError, IndexError) as exc:
        raise ParseError(f"bad value {text!r} for {key}: {exc}", line=line) from None


def parse_config_text(text: str) -> RunConfig:
    model_defaults = ModelConfig.tiny()
    train_defaults = TrainConfig()
    seen: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", line=lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if key in seen:
            raise ParseError(f"duplicate key {key!r} (first set on line {seen[key][1]})", line=lineno)
        if key in _MODEL_KEYS:
            default = getattr(model_defaults, key)
        elif key in _TRAIN_KEYS:
            default = getattr(train_defaults, key)
        elif key in _RUN_KEYS:
            default = getattr(RunConfig, key, None) if key != "kinds" else ()
        else:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        seen[key] = (_convert(key, value, default, lineno), lineno)

    values = {k: v for k, (v, _) in seen.items()}
    preset = values.pop("preset", "tiny")
    if preset not in PRESETS:
        raise ParseError(f"unknown preset {preset!r}", line=seen["preset"][1])
    model_kw = {k: values.pop(k) for k in list(values) if k in _MODEL_KEYS}
    train_kw = {k: values.pop(k) for k in list(values) if k in _TRAIN_KEYS}
    model = PRESETS[preset](**model_kw)
    train = TrainConfig(**train_kw)
    model.alpha = train.alpha
    run = RunConfig(model=model, train=train, preset=preset, **values)
    bad = set(run.kinds) - {"snow", "rain_fog", "raindrop"}
    if bad or not run.kinds:
        raise ConfigError(f"unknown degradation kinds {sorted(bad)}")
    return run


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"config is not valid UTF-8: {exc.reason}", offset=exc.start) from None
    return parse_config_text(text)


def format_config(run: RunConfig) -> str:
    """Inverse of :func:`parse_config_text` for every field of ``run``."""

    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = [f"preset = {run.preset}"]
    for k, v in run.model.as_dict().items():
        if k != "alpha":
            lines.append(f"{k} = {fmt(v)}")
    lines += [f"{k} = {fmt(v)}" for k, v in run.train.as_dict().items()]
    lines += [f"out_dir = {run.out_dir}", f"data_dir = {fmt(run.data_dir)}", f"kinds = {fmt(run.kinds)}"]
    return "\n".join(lines) + "\n"
