"""Multi-level feature stacks and raw correlation volumes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from catsagg.engine import Tensor, transpose_last2
from catsagg.errors import ConfigurationError, DimensionError
from catsagg.geometry import resize_align_corners


class Orientation(enum.Enum):
    ROWS_TARGET = "rows_target"
    ROWS_SOURCE = "rows_source"

    def flipped(self) -> "Orientation":
        return Orientation.ROWS_SOURCE if self is Orientation.ROWS_TARGET else Orientation.ROWS_TARGET


@dataclass
class FeatureStack:
    """``L`` feature maps of one image, each shaped ``(..., h_l, w_l, c_l)``.

    Leading axes, when present, are a batch of images sharing the layout.
    """

    levels: list[np.ndarray]
    image_id: str = ""
    source_kind: str = "synthetic"

    def __post_init__(self):
        if not self.levels:
            raise DimensionError("a feature stack needs at least one level")
        for lvl in self.levels:
            if lvl.ndim < 3 or any(d <= 0 for d in lvl.shape):
                raise DimensionError(f"feature level must be (..., h, w, c) with positive dims, got {lvl.shape}")
        if self.source_kind not in ("synthetic", "imported"):
            raise ConfigurationError(f"unknown source kind {self.source_kind!r}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.levels[0].shape[-3:-1]
        return int(h), int(w)

    @property
    def channels(self) -> list[int]:
        return [int(lvl.shape[-1]) for lvl in self.levels]

    def flat_level(self, l: int) -> np.ndarray:
        lvl = self.levels[l]
        h, w, c = lvl.shape[-3:]
        return lvl.reshape(*lvl.shape[:-3], h * w, c)


@dataclass
class CorrelationStack:
    """Correlation maps ``(..., L, hw, hw)`` plus which image indexes the rows."""

    maps: Tensor
    orientation: Orientation
    grid: tuple[int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.grid
        if self.maps.ndim < 3 or self.maps.shape[-2:] != (h * w, h * w):
            raise DimensionError(f"correlation maps {self.maps.shape} do not match grid {self.grid}")

    @property
    def num_levels(self) -> int:
        return self.maps.shape[-3]

    def transposed(self) -> "CorrelationStack":
        return replace(self, maps=transpose_last2(self.maps), orientation=self.orientation.flipped())


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Unit-normalise along the last axis; all-zero vectors stay zero."""
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def resize_normalize(stack: FeatureStack, target_hw: tuple[int, int]) -> FeatureStack:
    h, w = target_hw
    if h <= 0 or w <= 0:
        raise DimensionError(f"target grid must be positive, got {target_hw}")
    levels = [l2_normalize(resize_align_corners(np.asarray(lvl, dtype=np.float64), h, w)) for lvl in stack.levels]
    return FeatureStack(levels, stack.image_id, stack.source_kind)


def build_correlation(d_t: FeatureStack, d_s: FeatureStack) -> CorrelationStack:
    """``maps[l, i, j] = <D_t^l(i), D_s^l(j)>``: rows index the target."""
    if d_t.num_levels != d_s.num_levels:
        raise ConfigurationError(f"level count mismatch: target {d_t.num_levels}, source {d_s.num_levels}")
    if d_t.channels != d_s.channels:
        raise ConfigurationError(f"channel mismatch: target {d_t.channels}, source {d_s.channels}")
    if d_t.grid != d_s.grid:
        raise DimensionError(f"grid mismatch: target {d_t.grid}, source {d_s.grid}; resize first")
    maps = [d_t.flat_level(l) @ np.swapaxes(d_s.flat_level(l), -1, -2) for l in range(d_t.num_levels)]
    return CorrelationStack(Tensor(np.stack(maps, axis=-3)), Orientation.ROWS_TARGET, d_t.grid)
