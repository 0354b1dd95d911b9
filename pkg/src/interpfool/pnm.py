"""Binary PGM (P5) and PPM (P6) codec, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class PnmError(ValueError):
    pass


def _tokens(buf: bytes, count: int, pos: int):
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PnmError("truncated header")
        out.append(buf[start:pos])
    return out, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Return uint8 array, [H,W] for P5 and [H,W,3] for P6."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval <= 0 or maxval > 255:
        raise PnmError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    body = buf[pos:pos + need]
    if len(body) != need:
        raise PnmError("truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape((h, w) if ch == 1 else (h, w, 3))
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return arr.copy()


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PnmError("expected uint8 pixels")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PnmError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def write_pnm(path, img: np.ndarray) -> None:
    data = encode_pnm(img)
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
