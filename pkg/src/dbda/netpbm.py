"""Binary 8-bit PPM (P6) and PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read(path) -> np.ndarray:
    """Return an H×W (P5) or H×W×3 (P6) uint8 array."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported format {magic!r}; expected binary P5 or P6")
    toks, pos = _tokens(buf[2:], 3)
    try:
        width, height, maxval = (int(t) for t in toks)
    except ValueError:
        raise NetpbmError(f"{path}: malformed header {toks!r}") from None
    if maxval != 255:
        raise NetpbmError(f"{path}: only 8-bit files (maxval 255) are supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = buf[2 + pos : 2 + pos + need]
    if len(raster) != need:
        raise NetpbmError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def write(path, arr: np.ndarray) -> None:
    """Write H×W as P5 or H×W×3 as P6. Values must already be in [0, 255]."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot write array of shape {arr.shape} as PGM/PPM")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise NetpbmError("pixel values outside [0, 255]")
    h, w = arr.shape[:2]
    head = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(head + arr.astype(np.uint8).tobytes())
