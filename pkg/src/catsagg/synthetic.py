"""Feature pairs with analytically known dense flow.

Each level is a smooth random field: Gaussian coefficients on a coarse lattice,
bilinearly interpolated, so nearby cells look alike but distant ones differ.
Source features sample the field on the grid; target features sample it at
the inverse-warped grid, i.e. the target is the source seen through an affine
warp, plus i.i.d. Gaussian noise. The field extends well past the grid so
warped samples never run out of support.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from catsagg.correlation import FeatureStack, build_correlation, resize_normalize
from catsagg.aggregator import collapse_levels
from catsagg.engine import Tensor
from catsagg.errors import ConfigurationError
from catsagg.flow import FlowField, KeypointSet, aepe, pck, soft_argmax, transfer_keypoints
from catsagg.geometry import bilinear_sample, grid_coords

MAX_WARP_TRIES = 1000


@dataclass
class SynthConfig:
    h: int = 8
    w: int = 8
    channels: list[int] = field(default_factory=lambda: [16, 16, 16])
    # lattice spacing in cells per level; smaller means less smooth
    lattice_spacing: list[float] = field(default_factory=lambda: [4.0, 6.0, 8.0])
    rotation_deg: float = 30.0
    scale_range: tuple[float, float] = (0.75, 1.33)
    translation_frac: float = 0.15
    noise_sigma: float = 0.1
    num_keypoints: int = 20
    min_inbounds: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.lattice_spacing = [float(s) for s in self.lattice_spacing]
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if len(self.lattice_spacing) != len(self.channels):
            raise ConfigurationError(
                f"need one lattice spacing per level: {len(self.lattice_spacing)} vs {len(self.channels)} levels"
            )

    @property
    def levels(self) -> int:
        return len(self.channels)


@dataclass
class SyntheticPair:
    d_s: FeatureStack
    d_t: FeatureStack
    gt_flow: FlowField
    kps: KeypointSet
    warp: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.gt_flow.grid


def apply_affine(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map ``(n, 2)`` points through a 2x3 affine matrix."""
    return pts @ m[:, :2].T + m[:, 2]


def invert_affine(m: np.ndarray) -> np.ndarray:
    (a, b), (c, d) = m[:, :2]
    det = a * d - b * c
    inv = np.array([[d, -b], [-c, a]]) / det
    return np.concatenate([inv, -(inv @ m[:, 2])[:, None]], axis=1)


def random_affine(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotation and scale about the grid centre, then a translation."""
    theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    scale = rng.uniform(*cfg.scale_range)
    t = rng.uniform(-cfg.translation_frac, cfg.translation_frac, size=2) * np.array([cfg.w, cfg.h])
    a = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centre = np.array([(cfg.w - 1) / 2, (cfg.h - 1) / 2])
    return np.concatenate([a, (centre + t - a @ centre)[:, None]], axis=1)


def inbounds(pts: np.ndarray, h: int, w: int) -> np.ndarray:
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)


def _sample_warp(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    coords = grid_coords(cfg.h, cfg.w)
    for _ in range(MAX_WARP_TRIES):
        m = random_affine(cfg, rng)
        if abs(np.linalg.det(m[:, :2])) < 1e-3:
            continue
        if inbounds(apply_affine(m, coords), cfg.h, cfg.w).mean() >= cfg.min_inbounds:
            return m
    raise RuntimeError(f"no admissible warp after {MAX_WARP_TRIES} draws; widen the ranges")


def _random_field(cfg: SynthConfig, level: int, rng: np.random.Generator):
    spacing = cfg.lattice_spacing[level]
    margin = float(max(cfg.h, cfg.w))
    nx = int(np.ceil((cfg.w - 1 + 2 * margin) / spacing)) + 2
    ny = int(np.ceil((cfg.h - 1 + 2 * margin) / spacing)) + 2
    coeffs = rng.standard_normal((ny, nx, cfg.channels[level]))

    def sample(pts: np.ndarray) -> np.ndarray:
        return bilinear_sample(coeffs, (pts[:, 0] + margin) / spacing, (pts[:, 1] + margin) / spacing)

    return sample


def generate_pair(cfg: SynthConfig, seed: int | None = None, warp: np.ndarray | None = None) -> SyntheticPair:
    """Draw one pair; a pure function of ``(cfg, seed, warp)``.

    ``warp`` (2x3, source grid -> target grid) overrides the random draw.
    """
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    m = _sample_warp(cfg, rng) if warp is None else np.asarray(warp, dtype=np.float64)
    if abs(np.linalg.det(m[:, :2])) < 1e-3:
        raise ConfigurationError("degenerate warp")
    m_inv = invert_affine(m)
    h, w = cfg.h, cfg.w
    coords = grid_coords(h, w)
    back = apply_affine(m_inv, coords)

    src_levels, tgt_levels = [], []
    for l in range(cfg.levels):
        sample = _random_field(cfg, l, rng)
        src_levels.append(sample(coords).reshape(h, w, -1))
        tgt_levels.append(sample(back).reshape(h, w, -1))
    for l in range(cfg.levels):
        if cfg.noise_sigma > 0:
            tgt_levels[l] = tgt_levels[l] + cfg.noise_sigma * rng.standard_normal(tgt_levels[l].shape)

    fwd = apply_affine(m, coords)
    gt = FlowField((h, w), Tensor((fwd - coords).reshape(h, w, 2)), inbounds(fwd, h, w).reshape(h, w))

    candidates = np.flatnonzero(inbounds(fwd, h, w))
    k = min(cfg.num_keypoints, len(candidates))
    pick = np.sort(rng.choice(candidates, size=k, replace=False))
    kps = KeypointSet(coords[pick], fwd[pick])

    tag = f"synth-{seed}"
    return SyntheticPair(
        d_s=FeatureStack(src_levels, tag + "-src", "synthetic"),
        d_t=FeatureStack(tgt_levels, tag + "-tgt", "synthetic"),
        gt_flow=gt,
        kps=kps,
        warp=m,
        noise_sigma=cfg.noise_sigma,
        seed=seed,
    )


def generate_pairs(cfg: SynthConfig, count: int, first_seed: int | None = None) -> list[SyntheticPair]:
    base = cfg.seed if first_seed is None else first_seed
    return [generate_pair(cfg, seed=base + i) for i in range(count)]


def wta_flow(pair: SyntheticPair, tau: float) -> FlowField:
    """Soft-argmax on the level-mean of the raw correlation, no aggregation."""
    d_s = resize_normalize(pair.d_s, pair.grid)
    d_t = resize_normalize(pair.d_t, pair.grid)
    corr = build_correlation(d_t, d_s).transposed()
    return soft_argmax(collapse_levels(corr), pair.grid, tau)


def wta_baseline(pair: SyntheticPair, tau: float, alpha: float = 0.1) -> tuple[float, float]:
    """``(aepe, pck@alpha)`` of raw-correlation matching on one pair."""
    flow = wta_flow(pair, tau)
    pred, valid = transfer_keypoints(flow, pair.kps)
    return aepe(flow, pair.gt_flow).item(), pck(pred, pair.kps.tgt, alpha, pair.grid, valid)
