"""Binary PPM (P6, maxval 255) reading and writing.

Images are ``[3, H, W]`` float arrays in ``[0, 1]``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError

_WHITESPACE = b" \t\n\r\v\f"


def _read_token(buf: bytes, pos: int) -> tuple:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE and ch:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", offset=start)
    return buf[start:pos], start, pos


def decode_ppm(buf: bytes, dtype=np.float32) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ParseError(f"not a binary PPM (magic {buf[:2]!r})", offset=0)
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"invalid {what} {tok!r}", offset=start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ParseError(f"invalid size {width}x{height}", offset=2)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", offset=pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise ParseError("missing whitespace after maxval", offset=pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", offset=len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (raw.reshape(height, width, 3).transpose(2, 0, 1) / 255.0).astype(dtype)


def encode_ppm(img) -> bytes:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a [3, H, W] image, got shape {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def read_ppm(path, dtype=np.float32) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), dtype=dtype)


def write_ppm(img, path) -> None:
    Path(path).write_bytes(encode_ppm(img))
