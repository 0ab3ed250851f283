"""Grid coordinates and bilinear sampling shared across modules.

Spatial positions are flattened row-major, ``i = y * w + x``, everywhere in the
package. Coordinates are in grid-cell units with the origin at cell (0, 0) and
``x`` indexing columns.
"""

from __future__ import annotations

import numpy as np


def grid_coords(h: int, w: int) -> np.ndarray:
    """``(h*w, 2)`` array of ``(x, y)`` for every cell in flattening order."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def flat_index(x: int, y: int, w: int) -> int:
    return y * w + x


def bilinear_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``grid`` of shape ``(h, w, ...)`` at continuous points.

    Points outside the grid are clamped to the border (edge replication).
    Returns an array shaped ``xs.shape + grid.shape[2:]``.
    """
    h, w = grid.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    extra = (slice(None),) * xs.ndim + (None,) * (grid.ndim - 2)
    fx, fy = fx[extra], fy[extra]
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_align_corners(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of ``(..., h_in, w_in, c)`` with corners mapped to corners."""
    h_in, w_in = grid.shape[-3], grid.shape[-2]
    if (h_in, w_in) == (h, w):
        return grid.copy()
    ys = np.linspace(0.0, h_in - 1, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w_in - 1, w) if w > 1 else np.zeros(1)
    moved = np.moveaxis(grid, (-3, -2), (0, 1))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = bilinear_sample(moved, xx, yy)
    return np.moveaxis(out, (0, 1), (-3, -2))
