"""Gaussian-weighted fusion of narrative-summary sentence embeddings.

Alternative to summary cross-attention: each TR receives a convex
combination of sentence embeddings, weighted by a Gaussian in the distance
between the TR's time and each sentence's anchor.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError
from .manifest import SummaryContext


def gaussian_weights(anchors: np.ndarray, t_seconds: float, sigma_seconds: float) -> np.ndarray:
    """Normalized Gaussian weights over sentences; nonnegative, sum to 1."""
    if sigma_seconds <= 0:
        raise ContractError(f"sigma must be positive, got {sigma_seconds}")
    z = -((t_seconds - anchors) ** 2) / (2.0 * sigma_seconds**2)
    z -= z.max()  # stabilize before exponentiation
    w = np.exp(z)
    return w / w.sum()


def gaussian_summary_context(
    ctx: SummaryContext, t_seconds: float, sigma_seconds: float
) -> np.ndarray:
    """Fused d_sum-vector for one time point."""
    return gaussian_weights(ctx.anchors, t_seconds, sigma_seconds) @ ctx.embeddings


def summary_channel(
    ctx: SummaryContext, t_len: int, tr_seconds: float, sigma_seconds: float
) -> np.ndarray:
    """Fused summary vectors for every TR of a session, evaluated at TR
    centers: shape (t_len, d_sum)."""
    if sigma_seconds <= 0:
        raise ContractError(f"sigma must be positive, got {sigma_seconds}")
    centers = (np.arange(t_len) + 0.5) * tr_seconds
    z = -((centers[:, None] - ctx.anchors[None, :]) ** 2) / (2.0 * sigma_seconds**2)
    z -= z.max(axis=1, keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    return w @ ctx.embeddings
