"""Finite-difference check of the complete correlation -> flow -> AEPE loss."""

from __future__ import annotations

import numpy as np

from catsagg.aggregator import AggregatorConfig, AggregatorParams
from catsagg.engine.gradcheck import analytic_grads, numeric_grads
from catsagg.synthetic import SynthConfig, generate_pair
from catsagg.trainer import batch_loss, collate, prepare_pair


def perturbed_params(cfg: AggregatorConfig, seed: int = 0, scale: float = 0.1) -> AggregatorParams:
    """Random parameters with every tensor non-zero, so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    params = AggregatorParams.init(cfg, rng)
    for name, t in params.items():
        std = 0.02 if name.startswith("out.") else scale
        t.data = t.data + rng.normal(0.0, std, t.shape)
    return params


def full_model_gradcheck(
    model_cfg: AggregatorConfig,
    synth_cfg: SynthConfig,
    tau: float = 0.02,
    seed: int = 0,
    h: float = 1e-5,
) -> tuple[float, dict[str, float]]:
    """Max relative error over every parameter scalar, and per tensor."""
    pair = generate_pair(synth_cfg, seed=seed)
    batch = collate([prepare_pair(pair, (model_cfg.h, model_cfg.w))])
    params = perturbed_params(model_cfg, seed)
    names = list(params)
    tensors = [params[n] for n in names]
    f = lambda: batch_loss(batch, params, model_cfg, tau)  # noqa: E731
    per_tensor = {}
    for name, a, n in zip(names, analytic_grads(f, tensors), numeric_grads(f, tensors, h)):
        per_tensor[name] = float((np.abs(a - n) / np.maximum(1.0, np.abs(a))).max())
    return max(per_tensor.values()), per_tensor
