"""Binary netpbm codecs: PPM (P6) for RGB images, PGM (P5) for label masks.

Dependency-free and byte-deterministic. PGM supports 8- and 16-bit
samples; 16-bit samples are stored most-significant byte first, per the
format convention. PPM is fixed at maxval 255.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FileFormatError, UnsupportedDepthError


def _read_header_tokens(f: io.BufferedReader, count: int) -> list[int]:
    """Read `count` whitespace-separated integer tokens, skipping # comments."""
    tokens: list[int] = []
    current = b""
    while len(tokens) < count:
        c = f.read(1)
        if c == b"":
            raise CorruptionError("unexpected end of file in netpbm header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            c = b" "
        if c.isspace():
            if current:
                try:
                    tokens.append(int(current))
                except ValueError:
                    raise FileFormatError(f"bad netpbm header token {current!r}") from None
                current = b""
            continue
        current += c
    return tokens


def _read_magic(f: io.BufferedReader) -> bytes:
    magic = f.read(2)
    if len(magic) < 2:
        raise FileFormatError("file too short for a netpbm magic")
    return magic


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        magic = _read_magic(f)
        if magic != b"P6":
            raise FileFormatError(f"not a binary PPM (magic {magic!r})")
        width, height, maxval = _read_header_tokens(f, 3)
        if maxval != 255:
            raise UnsupportedDepthError(f"PPM maxval {maxval} unsupported (need 255)")
        if width <= 0 or height <= 0:
            raise FileFormatError(f"bad PPM dimensions {width}x{height}")
        raw = f.read(width * height * 3)
        if len(raw) < width * height * 3:
            raise CorruptionError("PPM pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    img = img.astype(np.uint8, copy=False)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into an (H, W) array, uint8 or uint16 by depth."""
    with open(path, "rb") as f:
        magic = _read_magic(f)
        if magic != b"P5":
            raise FileFormatError(f"not a binary PGM (magic {magic!r})")
        width, height, maxval = _read_header_tokens(f, 3)
        if maxval not in (255, 65535):
            raise UnsupportedDepthError(f"PGM maxval {maxval} unsupported (need 255 or 65535)")
        if width <= 0 or height <= 0:
            raise FileFormatError(f"bad PGM dimensions {width}x{height}")
        itemsize = 1 if maxval == 255 else 2
        raw = f.read(width * height * itemsize)
        if len(raw) < width * height * itemsize:
            raise CorruptionError("PGM pixel data truncated")
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return arr.astype(np.uint16).copy() if maxval == 65535 else arr.copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W) non-negative integer array as binary PGM.

    Depth is chosen from the data: values beyond 255 force 16-bit output
    (big-endian samples). Values beyond 65535 are rejected.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) image, got shape {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 65535):
        raise ValueError("PGM samples must lie in [0, 65535]")
    h, w = img.shape
    wide = img.size > 0 and img.max() > 255
    maxval = 65535 if wide else 255
    payload = img.astype(">u2" if wide else np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload)
