"""Central-difference gradient verification for the autograd engine.

The harness perturbs every parameter coordinate in place, so the checked
function must read parameter values at call time (closures over the Tensor
objects, not copies of their arrays).
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import ScalarFn, Tensor, no_grad
from .errors import GradCheckError


def grad_check(
    f: ScalarFn,
    params: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences.

    Returns the maximum over checked coordinates of
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).

    `max_coords`, when set, caps the number of coordinates checked per
    parameter tensor (uniformly sampled without replacement with `rng`);
    by default every coordinate is checked.
    """
    if max_coords is not None and rng is None:
        raise ValueError("max_coords requires an rng for coordinate sampling")
    for p in params:
        p.grad = None
    loss = f()
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise GradCheckError("gradient check aborted: loss is non-scalar or non-finite")
    loss.backward()
    ad_grads = [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params
    ]

    worst = 0.0
    with no_grad():
        for p, g_ad in zip(params, ad_grads):
            flat = p.data.reshape(-1)
            gflat = g_ad.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise GradCheckError(
                        f"gradient check aborted: non-finite loss at coordinate {i}"
                    )
                g_fd = (f_plus - f_minus) / (2.0 * eps)
                g = gflat[i]
                rel = abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd))
                if rel > worst:
                    worst = rel
    return worst
