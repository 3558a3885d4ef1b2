"""Binary PGM (P5) and PPM (P6) image files.

Images are exchanged with the rest of the package as float64 arrays in
[0, 1]: ``(H, W)`` for grayscale, ``(3, H, W)`` for color. Writing
quantizes to 8-bit with round-half-away behavior of ``np.rint`` after
clipping; headers are parsed token-wise with ``#`` comments allowed
anywhere whitespace is.
"""

from __future__ import annotations

import os
import tempfile
from typing import BinaryIO

import numpy as np

__all__ = ["read_image", "write_image"]


def _next_token(fh: BinaryIO) -> bytes:
    """Read one whitespace-delimited header token, skipping # comments."""
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            if tok:
                return tok
            raise ValueError("truncated image header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def _int_token(fh: BinaryIO, what: str) -> int:
    tok = _next_token(fh)
    try:
        val = int(tok)
    except ValueError:
        raise ValueError(f"bad {what} in image header: {tok!r}") from None
    if val <= 0:
        raise ValueError(f"{what} must be positive, got {val}")
    return val


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM/PPM file into a float array in [0, 1]."""
    with open(path, "rb") as fh:
        magic = _next_token(fh)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported image magic {magic!r} (want P5 or P6)")
        width = _int_token(fh, "width")
        height = _int_token(fh, "height")
        maxval = _int_token(fh, "maxval")
        if maxval > 255:
            raise ValueError(f"unsupported maxval {maxval} (only 8-bit supported)")
        channels = 1 if magic == b"P5" else 3
        count = width * height * channels
        payload = fh.read(count)
        if len(payload) != count:
            raise ValueError(
                f"truncated pixel data: expected {count} bytes, got {len(payload)}"
            )
    data = np.frombuffer(payload, dtype=np.uint8).astype(float) / float(maxval)
    if channels == 1:
        return data.reshape(height, width)
    return data.reshape(height, width, 3).transpose(2, 0, 1)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float array in [0, 1] as binary PGM (2-D) or PPM ((3,H,W))."""
    image = np.asarray(image, dtype=float)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if image.ndim == 2:
        magic, payload_shape = b"P5", image
    elif image.ndim == 3 and image.shape[0] == 3:
        magic, payload_shape = b"P6", image.transpose(1, 2, 0)
    else:
        raise ValueError(
            f"expected (H, W) or (3, H, W) image, got shape {image.shape}"
        )
    h, w = payload_shape.shape[:2]
    quantized = np.rint(np.clip(payload_shape, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    blob = header + quantized.tobytes()

    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".img-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
