"""On-disk formats for imported features and keypoints.

Feature file (little-endian)::

    b"CATF" | u32 version=1 | u32 L | L x ( u32 h | u32 w | u32 c | h*w*c f32, order (y, x, channel) )

Keypoint file: UTF-8 CSV with header ``idx,x_src,y_src,x_tgt,y_tgt``.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from catsagg.correlation import FeatureStack
from catsagg.errors import FormatError
from catsagg.flow import KeypointSet

FEATURE_MAGIC = b"CATF"
FEATURE_VERSION = 1
KEYPOINT_HEADER = ["idx", "x_src", "y_src", "x_tgt", "y_tgt"]
# refuse single levels above 2**31 scalars; guards against garbage headers
MAX_LEVEL_SCALARS = 1 << 31


def encode_features(stack: FeatureStack) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, stack.num_levels)]
    for lvl in stack.levels:
        if lvl.ndim != 3:
            raise FormatError(f"only unbatched (h, w, c) levels can be saved, got {lvl.shape}")
        parts.append(struct.pack("<III", *lvl.shape))
        parts.append(np.ascontiguousarray(lvl, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes, image_id: str = "") -> FeatureStack:
    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(buf):
            raise FormatError(
                f"truncated feature file: {what} needs {n} bytes, expected length >= {offset + n}, actual {len(buf)}",
                offset,
            )

    need(0, 12, "header")
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {FEATURE_MAGIC!r}", 0)
    version, num_levels = struct.unpack_from("<II", buf, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    if num_levels == 0:
        raise FormatError("feature file declares zero levels", 8)
    offset = 12
    levels = []
    for l in range(num_levels):
        need(offset, 12, f"level {l} header")
        h, w, c = struct.unpack_from("<III", buf, offset)
        if 0 in (h, w, c):
            raise FormatError(f"level {l} has a zero dimension ({h}, {w}, {c})", offset)
        n = h * w * c
        if n > MAX_LEVEL_SCALARS:
            raise FormatError(f"level {l} dimensions ({h}, {w}, {c}) overflow the size limit", offset)
        offset += 12
        need(offset, 4 * n, f"level {l} data")
        levels.append(np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(h, w, c).astype(np.float32))
        offset += 4 * n
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last level", offset)
    return FeatureStack(levels, image_id, "imported")


def save_features(path: str | Path, stack: FeatureStack) -> None:
    Path(path).write_bytes(encode_features(stack))


def load_features(path: str | Path) -> FeatureStack:
    path = Path(path)
    return decode_features(path.read_bytes(), image_id=path.stem)


def save_keypoints(path: str | Path, kps: KeypointSet) -> None:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(KEYPOINT_HEADER)
    for i, (s, t) in enumerate(zip(kps.src, kps.tgt)):
        writer.writerow([i, repr(float(s[0])), repr(float(s[1])), repr(float(t[0])), repr(float(t[1]))])
    Path(path).write_text(out.getvalue(), encoding="utf-8")


def load_keypoints(path: str | Path) -> KeypointSet:
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].strip().split(",") != KEYPOINT_HEADER:
        raise FormatError(f"{path}: header must be {','.join(KEYPOINT_HEADER)}", 0)
    src, tgt = [], []
    offset = len(lines[0].encode())
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            offset += len(line.encode())
            continue
        row = next(csv.reader([line]))
        if len(row) != 5:
            raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected 5", offset)
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise FormatError(f"{path}: line {lineno} has a non-numeric coordinate", offset) from None
        src.append(vals[:2])
        tgt.append(vals[2:])
        offset += len(line.encode())
    return KeypointSet(np.array(src).reshape(-1, 2), np.array(tgt).reshape(-1, 2))
