"""Soft-argmax flow decoding, end-point error, keypoint transfer and PCK."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from catsagg.engine import Tensor, as_tensor, matmul, norm_lastdim, reshape, softmax_lastdim, sum_
from catsagg.errors import DimensionError, EvaluationError, FormatError, ParameterError
from catsagg.geometry import bilinear_sample, grid_coords


@dataclass
class FlowField:
    """Displacements ``(..., h, w, 2)`` as ``(dx, dy)`` in grid cells, plus a validity mask."""

    grid: tuple[int, int]
    vectors: Tensor
    valid: np.ndarray

    def __post_init__(self):
        self.vectors = as_tensor(self.vectors)
        h, w = self.grid
        if self.vectors.shape[-3:] != (h, w, 2):
            raise DimensionError(f"flow vectors {self.vectors.shape} do not match grid {self.grid}")
        self.valid = np.broadcast_to(np.asarray(self.valid, dtype=bool), self.vectors.shape[:-1])

    def numpy(self) -> np.ndarray:
        return self.vectors.data


@dataclass
class KeypointSet:
    """Corresponding points, ``src``/``tgt`` of shape ``(n, 2)`` in grid units."""

    src: np.ndarray
    tgt: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.tgt = np.asarray(self.tgt, dtype=np.float64).reshape(-1, 2)
        if self.src.shape != self.tgt.shape:
            raise DimensionError(f"source/target keypoint counts differ: {self.src.shape} vs {self.tgt.shape}")
        if self.valid is None:
            self.valid = np.ones(len(self.src), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self) -> int:
        return len(self.src)


def soft_argmax(corr2d: Tensor, grid: tuple[int, int], tau: float) -> FlowField:
    """Flow from source-row correlation ``(..., hw, hw)``.

    Row ``i`` is turned into a distribution over target cells by a softmax at
    temperature ``tau``; the flow is its expected coordinate minus ``coord(i)``.
    """
    if not tau > 0:
        raise ParameterError(f"soft-argmax temperature must be positive, got {tau}")
    h, w = grid
    corr2d = as_tensor(corr2d)
    if corr2d.shape[-2:] != (h * w, h * w):
        raise DimensionError(f"correlation {corr2d.shape} does not match grid {grid}")
    coords = grid_coords(h, w).astype(corr2d.dtype)
    expected = matmul(softmax_lastdim(corr2d, tau), Tensor(coords))
    flow = expected - Tensor(coords)
    vectors = reshape(flow, corr2d.shape[:-2] + (h, w, 2))
    return FlowField(grid, vectors, np.ones(vectors.shape[:-1], dtype=bool))


def aepe(pred: FlowField, gt: FlowField) -> Tensor:
    """Mean end-point error over jointly valid pixels.

    With leading batch axes, each sample is averaged over its own valid pixels
    and the per-sample errors are then averaged.
    """
    if pred.grid != gt.grid:
        raise DimensionError(f"flow grids differ: {pred.grid} vs {gt.grid}")
    mask = pred.valid & gt.valid
    counts = mask.sum(axis=(-2, -1))
    if np.any(counts == 0):
        raise EvaluationError("no jointly valid pixels to evaluate")
    epe = norm_lastdim(pred.vectors - gt.vectors)
    weights = mask / counts[..., None, None]
    per_sample = sum_(epe * Tensor(weights.astype(epe.dtype)), axis=(-2, -1))
    n = int(np.prod(per_sample.shape)) if per_sample.ndim else 1
    return sum_(per_sample) * (1.0 / n) if per_sample.ndim else per_sample


def transfer_keypoints(flow: FlowField, kps: KeypointSet) -> tuple[np.ndarray, np.ndarray]:
    """Move source keypoints along the bilinearly sampled flow.

    Returns ``(points, valid)``; keypoints outside the source grid are marked
    invalid and their predictions are NaN.
    """
    vec = flow.numpy()
    if vec.ndim != 3:
        raise DimensionError("transfer_keypoints works on a single (unbatched) flow field")
    h, w = flow.grid
    x, y = kps.src[:, 0], kps.src[:, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    valid = kps.valid & inside
    pred = np.full_like(kps.src, np.nan)
    if valid.any():
        pred[valid] = kps.src[valid] + bilinear_sample(vec, x[valid], y[valid])
    return pred, valid


def pck(
    pred_kps: np.ndarray,
    gt_kps: np.ndarray,
    alpha: float,
    extent: tuple[float, float],
    valid: np.ndarray | None = None,
) -> float:
    """Fraction of valid keypoints within ``alpha * max(H, W)``; equality counts as correct."""
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    H, W = extent
    if H <= 0 or W <= 0:
        raise ParameterError(f"extent must be positive, got {extent}")
    pred_kps = np.asarray(pred_kps, dtype=np.float64).reshape(-1, 2)
    gt_kps = np.asarray(gt_kps, dtype=np.float64).reshape(-1, 2)
    mask = np.ones(len(gt_kps), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise EvaluationError("no valid keypoints to score")
    dist = np.linalg.norm(pred_kps[mask] - gt_kps[mask], axis=1)
    return float(np.mean(dist <= alpha * max(H, W)))


# ------------------------------------------------------------------ flow text


def save_flow_text(path: str | Path, flow: FlowField) -> None:
    """One line per pixel in row-major order: ``x,y,dx,dy,valid``."""
    vec = flow.numpy()
    if vec.ndim != 3:
        raise DimensionError("only single flow fields can be exported")
    h, w = flow.grid
    lines = []
    for y in range(h):
        for x in range(w):
            dx, dy = vec[y, x]
            lines.append(f"{x},{y},{float(dx)!r},{float(dy)!r},{int(flow.valid[y, x])}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_flow_text(path: str | Path, grid: tuple[int, int]) -> FlowField:
    h, w = grid
    vec = np.zeros((h, w, 2))
    valid = np.zeros((h, w), dtype=bool)
    seen = np.zeros((h, w), dtype=bool)
    offset = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(keepends=True), 1):
        fields = line.strip().split(",")
        if len(fields) != 5:
            raise FormatError(f"{path}: line {lineno} needs 5 fields, got {len(fields)}", offset)
        try:
            x, y = int(fields[0]), int(fields[1])
            vec_xy = float(fields[2]), float(fields[3])
            ok = int(fields[4])
        except ValueError:
            raise FormatError(f"{path}: line {lineno} is not numeric", offset) from None
        if not (0 <= x < w and 0 <= y < h):
            raise FormatError(f"{path}: line {lineno} pixel ({x},{y}) outside {w}x{h} grid", offset)
        vec[y, x] = vec_xy
        valid[y, x] = bool(ok)
        seen[y, x] = True
        offset += len(line.encode())
    if not seen.all():
        raise FormatError(f"{path}: {int((~seen).sum())} pixels missing for a {w}x{h} grid", offset)
    return FlowField(grid, Tensor(vec), valid)
