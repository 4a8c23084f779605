"""Training objective: MSE plus weighted negative Pearson correlation.

The MSE term averages squared Euclidean norms over time steps (no division
by the parcel count). The correlation term correlates prediction and target
across parcels at each time step and averages the negated result over time.
A variance floor of 1e-8 keeps the loss finite (and defined as 0 correlation)
on constant vectors.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

VAR_FLOOR = 1e-8


def pearson_rho(a, b) -> float:
    """Pearson correlation of two vectors of length >= 2.

    Returns 0.0 when either vector is constant (sum of squared deviations
    under the 1e-8 floor): a flat signal carries no correlation signal.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ContractError(f"pearson_rho expects equal-length vectors, got {a.shape}, {b.shape}")
    if a.size < 2:
        raise ContractError("pearson_rho needs at least 2 entries")
    ac = a - a.mean()
    bc = b - b.mean()
    ssa = float(ac @ ac)
    ssb = float(bc @ bc)
    if ssa < VAR_FLOOR or ssb < VAR_FLOOR:
        return 0.0
    cov = float(ac @ bc)
    # Cauchy-Schwarz bounds |rho| by 1; any excess is pure rounding, so snap
    # to the exact bound (this also makes rho(a, a) exactly 1.0).
    if cov * cov >= ssa * ssb:
        return 1.0 if cov > 0 else -1.0
    return cov / np.sqrt(ssa * ssb)


def combined_loss(pred, target: np.ndarray, lambda_corr: float) -> tuple[Tensor, float, float]:
    """Differentiable combined loss over a (..., T, P) prediction.

    Returns (loss node, mse value, mean correlation value). Leading batch
    axes are averaged, so the scalar equals the mean per-window loss.
    """
    pred = ag.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ContractError(f"pred shape {pred.data.shape} != target shape {target.shape}")
    if pred.ndim < 2 or pred.data.shape[-1] < 2:
        raise ContractError("combined_loss expects (..., T, P) with P >= 2")
    if lambda_corr < 0:
        raise ContractError(f"lambda must be >= 0, got {lambda_corr}")

    diff = pred - Tensor(target)
    mse = (diff * diff).sum(axis=-1).mean()

    pc = pred - pred.mean(axis=-1, keepdims=True)
    tc = target - target.mean(axis=-1, keepdims=True)
    sst = (tc * tc).sum(axis=-1)
    cov = (pc * Tensor(tc)).sum(axis=-1)
    ssp = (pc * pc).sum(axis=-1)
    denom = ag.sqrt((ssp + VAR_FLOOR) * Tensor(sst + VAR_FLOOR))
    corr = (cov / denom).mean()

    loss = mse + float(lambda_corr) * (-corr)
    return loss, float(mse.data), float(corr.data)
