"""Binary checkpoint format.

Layout (all little-endian)::

    magic      6 bytes  b"HISTO1"
    config     fixed-order fields, see _CONFIG_LAYOUT
    step       u64
    count      u32, then ``count`` tensor records
    moments    u32 count, then per entry a name and two tensor payloads (m, v)

A tensor record is ``u16 name length, name (UTF-8), u8 ndim, u32 * ndim
shape, u64 byte length, float32 data``.  Parameters are written in store
order, so a save/load round trip of a float32 store is bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .attention import BRANCHES, SCALES, SORT_ORDERS
from .errors import ParseError
from .model import FEED_FORWARD, STAGES, ModelConfig, ParameterStore

MAGIC = b"HISTO1"
_FUSIONS = ("concat", "add")
_FFNS = tuple(FEED_FORWARD)

# (field, struct code, count); enum fields store their index, optional ints store -1 for None
_CONFIG_LAYOUT = (
    ("depths", "i", STAGES),
    ("channels", "i", 1),
    ("heads", "i", STAGES),
    ("expansion", "d", 1),
    ("bins", "i", STAGES),
    ("refinement_depth", "i", 1),
    ("skip_fusion", "B", 1),
    ("scale", "B", 1),
    ("sort_order", "B", 1),
    ("branches", "B", 1),
    ("feed_forward", "B", 1),
    ("ffn_shuffle", "i", 1),
    ("ffn_dilation", "i", 1),
    ("alpha", "d", 1),
)
_ENUMS = {"skip_fusion": _FUSIONS, "scale": SCALES, "sort_order": SORT_ORDERS,
          "branches": BRANCHES, "feed_forward": _FFNS}


def _config_values(cfg: ModelConfig) -> list:
    out = []
    for name, _, count in _CONFIG_LAYOUT:
        v = getattr(cfg, name)
        if name in _ENUMS:
            v = _ENUMS[name].index(v)
        elif v is None:
            v = (-1,) * count if count > 1 else -1
        out += list(v) if count > 1 else [v]
    return out


def _config_format() -> str:
    return "<" + "".join(f"{count}{code}" for _, code, count in _CONFIG_LAYOUT)


def _write_array(buf, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<Q", len(data)))
    buf.write(data)


def _write_name(buf, name: str):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def encode_checkpoint(config: ModelConfig, store: ParameterStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack(_config_format(), *_config_values(config)))
    buf.write(struct.pack("<QI", store.step, len(store)))
    for name, t in store.items():
        _write_name(buf, name)
        _write_array(buf, t.data)
    moments = [(n, store.moments[n]) for n in store if n in store.moments]
    buf.write(struct.pack("<I", len(moments)))
    for name, (m, v) in moments:
        _write_name(buf, name)
        _write_array(buf, m)
        _write_array(buf, v)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self) -> str:
        (n,) = self.unpack("<H", "name length")
        start = self.pos
        try:
            return self.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", offset=start) from None

    def array(self, what: str) -> np.ndarray:
        (ndim,) = self.unpack("<B", f"{what} rank")
        shape = self.unpack(f"<{ndim}I", f"{what} shape")
        (nbytes,) = self.unpack("<Q", f"{what} byte length")
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise ParseError(f"{what}: byte length {nbytes} does not match shape {shape}", offset=self.pos - 8)
        return np.frombuffer(self.take(nbytes, what), dtype="<f4").reshape(shape).astype(np.float32)


def decode_checkpoint(data: bytes) -> tuple:
    """Return ``(ModelConfig, ParameterStore)``."""
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", offset=0)
    raw = list(r.unpack(_config_format(), "config"))
    kw = {}
    for name, _, count in _CONFIG_LAYOUT:
        vals, raw = raw[:count], raw[count:]
        v = tuple(vals) if count > 1 else vals[0]
        if name in _ENUMS:
            if not 0 <= v < len(_ENUMS[name]):
                raise ParseError(f"invalid {name} code {v}", offset=len(MAGIC))
            v = _ENUMS[name][v]
        elif name in ("bins", "refinement_depth") and (v == -1 or v == (-1,) * count):
            v = None
        kw[name] = v
    config = ModelConfig(**kw)
    step, count = r.unpack("<QI", "header")
    store = ParameterStore(step=step)
    for _ in range(count):
        name = r.name()
        store.add(name, r.array(name))
    (n_moments,) = r.unpack("<I", "moment count")
    for _ in range(n_moments):
        name = r.name()
        if name not in store:
            raise ParseError(f"moments for unknown parameter {name!r}", offset=r.pos)
        store.moments[name] = (r.array(name + " m"), r.array(name + " v"))
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes", offset=r.pos)
    return config, store


def save_checkpoint(path, config: ModelConfig, store: ParameterStore) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(config, store))
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    return decode_checkpoint(Path(path).read_bytes())
