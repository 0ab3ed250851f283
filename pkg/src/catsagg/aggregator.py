"""Transformer cost aggregation over multi-level correlation maps.

Shapes follow the reference pseudo-code: a stack of ``L`` augmented maps of
shape ``(hw, hw + p)`` goes through intra-correlation attention (tokens are the
``hw`` rows of one level) and inter-correlation attention (tokens are the ``L``
level vectors at a fixed row), each block pre-LN with a residual. The same
aggregator runs twice, the second time on the transposed output, and a linear
map brings the token width back from ``hw + p`` to ``hw``.

Any number of leading batch axes is accepted in front of ``L``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, MutableMapping

import numpy as np

from catsagg.correlation import CorrelationStack, FeatureStack, Orientation
from catsagg.engine import (
    Tensor,
    concat_lastdim,
    layernorm,
    linear,
    mean_axis,
    mlp,
    multihead_attention,
    stack,
    swapaxes,
    transpose_last2,
)
from catsagg.errors import ConfigurationError, DimensionError, UsageError


@dataclass
class AggregatorConfig:
    h: int = 8
    w: int = 8
    p: int = 16
    channels: list[int] = field(default_factory=lambda: [16, 16, 16])
    heads: int = 4
    depth: int = 1
    mlp_ratio: float = 4.0
    appearance_on: bool = True
    multi_level_on: bool = True
    swap_on: bool = True
    residual_on: bool = True
    init_std: float = 0.02
    pos_embed_init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.h < 1 or self.w < 1 or self.p < 1:
            raise ConfigurationError(f"grid and embedding sizes must be positive (h={self.h}, w={self.w}, p={self.p})")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"need at least one level with positive channels, got {self.channels}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ConfigurationError(f"token dim {self.token_dim} (hw+p) is not divisible by {self.heads} heads")
        if self.mlp_ratio <= 0:
            raise ConfigurationError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def hw(self) -> int:
        return self.h * self.w

    @property
    def token_dim(self) -> int:
        return self.hw + self.p

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def effective_levels(self) -> int:
        return self.levels if self.multi_level_on else 1

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.token_dim)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AggregatorConfig":
        return cls(**d)


_LN = ("ln_intra_attn", "ln_intra_mlp", "ln_inter_attn", "ln_inter_mlp")


class AggregatorParams:
    """Named learnable tensors of one shared aggregator.

    There is exactly one tensor per name; both passes of the swapped
    aggregation read the same storage.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "AggregatorParams":
        return AggregatorParams(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()}
        )

    @classmethod
    def init(cls, cfg: AggregatorConfig, rng: np.random.Generator, dtype=np.float64) -> "AggregatorParams":
        """Normal(0, init_std) weights, zero biases, unit LN gains, zero output map."""
        shapes = parameter_shapes(cfg)
        tensors = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "pos_embed":
                arr = rng.normal(0.0, cfg.pos_embed_init_std, shape)
            elif name.startswith("out."):
                arr = np.zeros(shape)
            elif leaf == "gamma":
                arr = np.ones(shape)
            elif leaf.startswith("b") or leaf == "beta":
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, cfg.init_std, shape)
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return cls(tensors)


def parameter_shapes(cfg: AggregatorConfig) -> dict[str, tuple[int, ...]]:
    d, p, hidden = cfg.token_dim, cfg.p, cfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for l, c in enumerate(cfg.channels):
        shapes[f"proj.{l}.w"] = (c, p)
        shapes[f"proj.{l}.b"] = (p,)
    shapes["pos_embed"] = (cfg.hw, d)
    for k in range(cfg.depth):
        blk = f"blocks.{k}."
        for ln in _LN:
            shapes[blk + ln + ".gamma"] = (d,)
            shapes[blk + ln + ".beta"] = (d,)
        for attn in ("attn_intra", "attn_inter"):
            for m in "qkvo":
                shapes[f"{blk}{attn}.w{m}"] = (d, d)
                shapes[f"{blk}{attn}.b{m}"] = (d,)
        for m in ("mlp_intra", "mlp_inter"):
            shapes[f"{blk}{m}.w1"] = (d, hidden)
            shapes[f"{blk}{m}.b1"] = (hidden,)
            shapes[f"{blk}{m}.w2"] = (hidden, d)
            shapes[f"{blk}{m}.b2"] = (d,)
    shapes["out.w"] = (d, cfg.hw)
    shapes["out.b"] = (cfg.hw,)
    return shapes


def _ln(x: Tensor, params: AggregatorParams, name: str, eps: float) -> Tensor:
    return layernorm(x, params[name + ".gamma"], params[name + ".beta"], eps)


def project_appearance(d: FeatureStack, params: AggregatorParams, cfg: AggregatorConfig) -> Tensor:
    """Per-level affine projection of flattened features: ``(..., L, hw, p)``."""
    if d.num_levels != cfg.levels:
        raise ConfigurationError(f"feature stack has {d.num_levels} levels, aggregator expects {cfg.levels}")
    if d.channels != cfg.channels:
        raise ConfigurationError(f"feature channels {d.channels} do not match aggregator {cfg.channels}")
    if d.grid != (cfg.h, cfg.w):
        raise ConfigurationError(f"feature grid {d.grid} does not match aggregator {(cfg.h, cfg.w)}")
    embeds = [
        linear(Tensor(d.flat_level(l)), params[f"proj.{l}.w"], params[f"proj.{l}.b"])
        for l in range(d.num_levels)
    ]
    return stack(embeds, axis=-3)


def transformer_agg(
    x: Tensor,
    params: AggregatorParams,
    cfg: AggregatorConfig,
    trace: MutableMapping[str, np.ndarray] | None = None,
    tag: str = "",
) -> Tensor:
    """One aggregator pass over ``x`` of shape ``(..., L, hw, hw + p)``."""
    if x.ndim < 3 or x.shape[-2:] != (cfg.hw, cfg.token_dim):
        raise ConfigurationError(f"aggregator input {x.shape} does not end in (L, {cfg.hw}, {cfg.token_dim})")
    eps = cfg.ln_eps
    x = x + params["pos_embed"]
    for k in range(cfg.depth):
        blk = f"blocks.{k}."
        x = x + multihead_attention(
            _ln(x, params, blk + "ln_intra_attn", eps),
            params.group(blk + "attn_intra."),
            cfg.heads,
            trace,
            f"{tag}block{k}.intra",
        )
        x = x + mlp(_ln(x, params, blk + "ln_intra_mlp", eps), params.group(blk + "mlp_intra."))
        # tokens become the L level vectors at each row position
        x = swapaxes(x, -3, -2)
        x = x + multihead_attention(
            _ln(x, params, blk + "ln_inter_attn", eps),
            params.group(blk + "attn_inter."),
            cfg.heads,
            trace,
            f"{tag}block{k}.inter",
        )
        x = swapaxes(x, -3, -2)
        x = x + mlp(_ln(x, params, blk + "ln_inter_mlp", eps), params.group(blk + "mlp_inter."))
    return x


def _embedding(d: FeatureStack, params: AggregatorParams, cfg: AggregatorConfig, like: Tensor) -> Tensor:
    if not cfg.appearance_on:
        # p columns stay reserved so every ablation shares one parameter layout
        return Tensor(np.zeros(like.shape[:-1] + (cfg.p,), dtype=like.dtype))
    emb = project_appearance(d, params, cfg)
    if not cfg.multi_level_on:
        emb = mean_axis(emb, -3, keepdims=True)
    return emb


def cats_forward(
    corr: CorrelationStack,
    d_s: FeatureStack,
    d_t: FeatureStack,
    params: AggregatorParams,
    cfg: AggregatorConfig,
    trace: MutableMapping[str, np.ndarray] | None = None,
) -> CorrelationStack:
    """Refine raw correlation; the result's rows index the source when swapping is on."""
    if corr.orientation is not Orientation.ROWS_TARGET:
        raise UsageError("cats_forward expects raw correlation with target rows")
    if corr.grid != (cfg.h, cfg.w):
        raise ConfigurationError(f"correlation grid {corr.grid} does not match aggregator {(cfg.h, cfg.w)}")
    if corr.num_levels != cfg.levels:
        raise ConfigurationError(f"correlation has {corr.num_levels} levels, aggregator expects {cfg.levels}")
    c = corr.maps
    if not cfg.multi_level_on:
        c = mean_axis(c, -3, keepdims=True)
    lead = c.shape[:-3]
    for d in (d_s, d_t):
        if d.levels[0].shape[:-3] != lead:
            raise DimensionError(f"feature batch shape {d.levels[0].shape[:-3]} differs from correlation {lead}")

    w_out, b_out = params["out.w"], params["out.b"]
    x = concat_lastdim([c, _embedding(d_t, params, cfg, c)])
    x = linear(transformer_agg(x, params, cfg, trace, "stage1."), w_out, b_out)
    if cfg.residual_on:
        x = x + c
    if not cfg.swap_on:
        return CorrelationStack(x, Orientation.ROWS_TARGET, corr.grid, dict(corr.meta))

    x = transpose_last2(x)
    x = concat_lastdim([x, _embedding(d_s, params, cfg, x)])
    x = linear(transformer_agg(x, params, cfg, trace, "stage2."), w_out, b_out)
    if cfg.residual_on:
        x = x + transpose_last2(c)
    return CorrelationStack(x, Orientation.ROWS_SOURCE, corr.grid, dict(corr.meta))


def collapse_levels(refined: CorrelationStack | Tensor) -> Tensor:
    """Average the level axis: ``(..., L, hw, hw) -> (..., hw, hw)``."""
    maps = refined.maps if isinstance(refined, CorrelationStack) else refined
    return mean_axis(maps, -3)
