"""Transformer building blocks on top of the autograd engine.

All layers operate on batched tensors of shape (B, T, d). Parameters are
float64 leaves; each layer exposes `params()` returning a flat name -> Tensor
mapping so models can assemble a named parameter tree for checkpointing.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError

MASK_OFF = -1e30  # additive bias that zeroes a logit after softmax


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Zero-mean uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class AttentionMask:
    """Which (query, key) pairs may interact.

    `causal` allows j <= i and requires square shape; `full` allows all pairs.
    """

    kind: str
    t_q: int
    t_k: int

    def __post_init__(self):
        if self.kind not in ("causal", "full"):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if self.kind == "causal" and self.t_q != self.t_k:
            raise ConfigError("causal mask requires equal query/key lengths")
        if self.t_q < 1 or self.t_k < 1:
            raise ConfigError("mask lengths must be >= 1")

    def bias(self) -> np.ndarray | None:
        """Additive logit bias, or None when nothing is masked."""
        if self.kind == "full":
            return None
        return _causal_bias(self.t_q)


@lru_cache(maxsize=64)
def _causal_bias(t: int) -> np.ndarray:
    b = np.zeros((t, t))
    b[np.triu_indices(t, k=1)] = MASK_OFF
    b.setflags(write=False)
    return b


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = ag.parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.b = ag.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ag.linear(x, self.w, self.b)

    def params(self) -> dict[str, Tensor]:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ag.parameter(np.ones(d))
        self.bias = ag.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Dropout:
    """Inverted dropout; identity when not training or rate is zero."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None, training: bool) -> Tensor:
        if not training or self.rate == 0.0:
            return x
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.data.shape) < keep) / keep
        return ag.mul(x, Tensor(mask))


class RelPosTable:
    """Learnable additive positional embeddings indexed by within-window offset."""

    def __init__(self, max_len: int, d: int):
        if max_len < 1:
            raise ConfigError("positional table needs max_len >= 1")
        self.max_len = max_len
        self.entries = ag.parameter(np.zeros((max_len, d)))

    def slice(self, offset: int, length: int) -> Tensor:
        if offset < 0 or offset + length > self.max_len:
            raise ConfigError(
                f"positions [{offset}, {offset + length}) exceed table length {self.max_len}"
            )
        return self.entries[offset : offset + length]

    def params(self) -> dict[str, Tensor]:
        return {"entries": self.entries}


def add_rel_pos(x, table: RelPosTable, offset: int = 0) -> Tensor:
    """x[t] + table[offset + t] along the sequence axis."""
    x = ag.as_tensor(x)
    return ag.add(x, table.slice(offset, x.data.shape[-2]))


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections.

    Residual connections and layer norms are applied by the caller. Dropout,
    when training, acts on the attention weights.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if d % heads != 0:
            raise ConfigError(f"hidden width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.wq = Linear(d, d, rng)
        # No key bias: softmax is invariant to a per-query constant logit
        # shift, so a key bias is an untrainable direction.
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.dropout = Dropout(dropout)

    def __call__(
        self,
        q_in,
        kv_in,
        mask: AttentionMask,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> Tensor:
        q_in = ag.as_tensor(q_in)
        kv_in = ag.as_tensor(kv_in)
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in = ag.reshape(q_in, (1,) + q_in.data.shape)
        if kv_in.ndim == 2:
            kv_in = ag.reshape(kv_in, (1,) + kv_in.data.shape)
        bq, tq, _ = q_in.data.shape
        bk, tk, _ = kv_in.data.shape
        if mask.t_q != tq or mask.t_k != tk:
            raise ConfigError(
                f"mask ({mask.t_q}x{mask.t_k}) inconsistent with sequences ({tq}x{tk})"
            )
        h, hd = self.heads, self.head_dim

        def split_heads(x, b, t):
            return ag.transpose(ag.reshape(x, (b, t, h, hd)), (0, 2, 1, 3))

        q = split_heads(self.wq(q_in), bq, tq)
        k = split_heads(self.wk(kv_in), bk, tk)
        v = split_heads(self.wv(kv_in), bk, tk)

        logits = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), self.scale)
        bias = mask.bias()
        if bias is not None:
            logits = ag.add(logits, Tensor(bias))
        weights = ag.softmax(logits, axis=-1)
        weights = self.dropout(weights, rng, training)
        ctx = ag.matmul(weights, v)
        b_out = max(bq, bk)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b_out, tq, self.d))
        out = self.wo(ctx)
        if squeeze:
            out = ag.reshape(out, (tq, self.d))
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k, v in lin.params().items():
                out[f"{name}.{k}"] = v
        return out


def multi_head_attention(q, k, v, mask: AttentionMask, heads: int, params: dict) -> Tensor:
    """Functional attention with caller-supplied projection parameters.

    `params` maps wq/wk/wv/wo to (d, d) weight arrays plus optional
    wq_b/... bias vectors. Separate k and v inputs are accepted; the class
    interface covers the common self/cross cases where they coincide.
    """
    q = ag.as_tensor(q)
    k = ag.as_tensor(k)
    v = ag.as_tensor(v)
    d = q.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"hidden width {d} not divisible by {heads} heads")
    hd = d // heads

    def proj(x, name):
        w = ag.as_tensor(params[name])
        b = params.get(f"{name}_b")
        return ag.linear(x, w, ag.as_tensor(b) if b is not None else None)

    def split(x, t):
        return ag.transpose(ag.reshape(x, (t, heads, hd)), (1, 0, 2))

    tq, tk = q.data.shape[0], k.data.shape[0]
    if mask.t_q != tq or mask.t_k != tk:
        raise ConfigError("mask inconsistent with sequence lengths")
    qh = split(proj(q, "wq"), tq)
    kh = split(proj(k, "wk"), tk)
    vh = split(proj(v, "wv"), tk)
    logits = ag.mul(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(hd))
    bias = mask.bias()
    if bias is not None:
        logits = ag.add(logits, Tensor(bias))
    weights = ag.softmax(logits, axis=-1)
    ctx = ag.reshape(ag.transpose(ag.matmul(weights, vh), (1, 0, 2)), (tq, d))
    return proj(ctx, "wo")


class FeedForward:
    """Two affine layers with a GELU between; hidden width = ratio * d."""

    def __init__(self, d: int, rng: np.random.Generator, dropout: float = 0.0, ratio: int = 4):
        self.lin1 = Linear(d, ratio * d, rng)
        self.lin2 = Linear(ratio * d, d, rng)
        self.dropout = Dropout(dropout)

    def __call__(self, x, rng=None, training: bool = False) -> Tensor:
        h = ag.gelu(self.lin1(x))
        h = self.dropout(h, rng, training)
        return self.lin2(h)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("lin1", self.lin1), ("lin2", self.lin2)):
            for k, v in lin.params().items():
                out[f"{name}.{k}"] = v
        return out


def collect_params(prefix: str, layer) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in layer.params().items()}
