"""Binary PGM dumps of correlation rows and attention maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from catsagg.errors import DimensionError, FormatError

MID_GRAY = 128


def to_u8(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255; a constant map becomes uniform mid-gray."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, MID_GRAY, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    if image.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D map, got shape {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + to_u8(image).tobytes()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path} is not a binary PGM", 0)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
