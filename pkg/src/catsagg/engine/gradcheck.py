"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from catsagg.engine.tensor import Tape, Tensor
from catsagg.errors import ParameterError, UsageError


def analytic_grads(f: Callable, xs: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise UsageError(f"gradient check needs a scalar function, got shape {loss.shape}")
    if loss._tape is tape:
        tape.backward(loss)
    grads = [np.zeros_like(x.data) if x.grad is None else x.grad for x in xs]
    for x, (rg, g) in zip(xs, saved):
        x.requires_grad, x.grad = rg, g
    return grads


def numeric_grads(f: Callable, xs: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    out = []
    for x in xs:
        flat = x.data.reshape(-1)
        g = np.empty(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out.append(g.reshape(x.shape))
    return out


def finite_diff_check(f: Callable, x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` maps ``x`` (a tensor, or a sequence of tensors) to a scalar tensor.
    The tensors are perturbed in place, so ``f`` must read them on every call.
    """
    if not h > 0:
        raise ParameterError(f"step size must be positive, got {h}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise UsageError("finite-difference checks require 64-bit tensors")
    call = lambda: f(x)  # noqa: E731
    worst = 0.0
    for a, n in zip(analytic_grads(call, xs), numeric_grads(call, xs, h)):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
