"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tape, Tensor

FD_EPS = 1e-5


def zero_grads(params: Sequence[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


def finite_diff_check(loss_fn: Callable[[], Tensor],
                      params: Mapping[str, Tensor],
                      eps: float = FD_EPS,
                      min_coords: int = 200,
                      seed: int = 0) -> float:
    """Compare analytic gradients against central differences.

    Runs ``loss_fn`` once under a tape for analytic gradients, then perturbs
    a random subsample of at least ``min_coords`` coordinates (all of them if
    the model is smaller) by +/-eps and recomputes the loss untaped. Returns
    the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    items = sorted(params.items())
    zero_grads(dict(items))
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    coords: list[tuple[int, int]] = []
    for pi, (_, p) in enumerate(items):
        coords.extend((pi, j) for j in range(p.data.size))
    rng = np.random.default_rng(seed)
    if len(coords) > min_coords:
        pick = rng.choice(len(coords), size=min_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for pi, j in coords:
        name, p = items[pi]
        analytic = 0.0 if p.grad is None else float(p.grad.flat[j])
        orig = p.data.flat[j]
        p.data.flat[j] = orig + eps
        f_plus = float(loss_fn().data)
        p.data.flat[j] = orig - eps
        f_minus = float(loss_fn().data)
        p.data.flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
