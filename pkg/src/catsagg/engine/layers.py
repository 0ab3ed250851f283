"""Transformer building blocks composed from the engine primitives.

Weights follow the ``x @ w + b`` convention, ``w`` shaped ``(in, out)``.
Parameter groups are plain mappings so callers can pass any view of a larger
named parameter set.
"""

from __future__ import annotations

from typing import Mapping, MutableMapping

import numpy as np

from catsagg.engine.tensor import (
    Tensor,
    gelu,
    matmul,
    reshape,
    softmax_lastdim,
    swapaxes,
)
from catsagg.errors import ConfigurationError, DimensionError

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
MLP_KEYS = ("w1", "b1", "w2", "b2")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else y + b


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, d = t.shape
    return swapaxes(reshape(t, (*lead, n, heads, d // heads)), -3, -2)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, heads, n, dh = t.shape
    return reshape(swapaxes(t, -3, -2), (*lead, n, heads * dh))


def multihead_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    heads: int,
    trace: MutableMapping[str, np.ndarray] | None = None,
    trace_key: str = "attn",
) -> Tensor:
    """Multi-head self-attention over the second-to-last axis of ``x``.

    ``x`` has shape ``(..., tokens, d)``; every leading axis is an independent
    batch. The softmax scale is ``1/sqrt(d/heads)``. When ``trace`` is given,
    the attention probabilities ``(..., heads, tokens, tokens)`` are stored
    under ``trace_key``.
    """
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"token dim {d} is not divisible by {heads} heads")
    missing = [k for k in ATTENTION_KEYS if k not in params]
    if missing:
        raise ConfigurationError(f"attention params missing {missing}")
    q = _split_heads(linear(x, params["wq"], params["bq"]), heads)
    k = _split_heads(linear(x, params["wk"], params["bk"]), heads)
    v = _split_heads(linear(x, params["wv"], params["bv"]), heads)
    scale = 1.0 / np.sqrt(d // heads)
    attn = softmax_lastdim(matmul(q, swapaxes(k, -1, -2)) * scale)
    if trace is not None:
        trace[trace_key] = attn.data.copy()
    out = _merge_heads(matmul(attn, v))
    return linear(out, params["wo"], params["bo"])


def mlp(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """affine -> GELU -> affine along the last axis."""
    missing = [k for k in MLP_KEYS if k not in params]
    if missing:
        raise ConfigurationError(f"mlp params missing {missing}")
    if params["w2"].shape[1] != x.shape[-1]:
        raise DimensionError(f"mlp: output weight {params['w2'].shape} does not map back to {x.shape[-1]}")
    return linear(gelu(linear(x, params["w1"], params["b1"])), params["w2"], params["b2"])
