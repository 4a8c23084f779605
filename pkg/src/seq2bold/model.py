"""Encoder-decoder architecture for sequence-to-sequence fMRI prediction.

A causal Transformer encoder reads fused multimodal features; a causal
decoder generates parcel vectors autoregressively, attending to its own
past, to the encoded stimulus, and (in cross-attention mode) to narrative
summary sentence embeddings, then maps hidden states to parcels through a
per-subject output head. Subject identity also enters additively at the
decoder input as a learned embedding (a concatenation variant is available
behind `subject_mode="concat"`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import ConfigError, ContractError, DuplicateSubjectError, SubjectNotFoundError
from .nnlayers import (
    AttentionMask,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    RelPosTable,
    add_rel_pos,
    collect_params,
    uniform_init,
)

SUMMARY_MODES = ("cross_attention", "gaussian")
SUBJECT_MODES = ("add", "concat")


@dataclass
class ModelConfig:
    parcels: int
    modalities: dict[str, int]
    d: int = 64
    l_enc: int = 2
    l_dec: int = 2
    heads: int = 4
    d_sum: int = 8
    dropout: float = 0.1
    max_len: int = 64
    mlp_ratio: int = 4
    summary_mode: str = "cross_attention"
    subject_mode: str = "add"
    summary_sigma_s: float = 30.0

    def __post_init__(self):
        self.modalities = dict(self.modalities)
        if self.parcels < 1:
            raise ConfigError("parcels must be >= 1")
        if not self.modalities or any(v < 1 for v in self.modalities.values()):
            raise ConfigError("modalities must map names to widths >= 1")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"hidden width {self.d} must be a positive multiple of heads={self.heads}")
        if self.l_enc < 1 or self.l_dec < 1:
            raise ConfigError("layer counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.d_sum < 1 or self.max_len < 1 or self.mlp_ratio < 1:
            raise ConfigError("d_sum, max_len, and mlp_ratio must be >= 1")
        if self.summary_mode not in SUMMARY_MODES:
            raise ConfigError(f"summary_mode must be one of {SUMMARY_MODES}")
        if self.subject_mode not in SUBJECT_MODES:
            raise ConfigError(f"subject_mode must be one of {SUBJECT_MODES}")
        if self.summary_sigma_s <= 0:
            raise ConfigError("summary_sigma_s must be positive")

    @property
    def modality_order(self) -> list[str]:
        return sorted(self.modalities)

    @property
    def fuse_width(self) -> int:
        base = sum(self.modalities.values())
        return base + (self.d_sum if self.summary_mode == "gaussian" else 0)

    def to_dict(self) -> dict:
        return {
            "parcels": self.parcels,
            "modalities": dict(sorted(self.modalities.items())),
            "d": self.d,
            "l_enc": self.l_enc,
            "l_dec": self.l_dec,
            "heads": self.heads,
            "d_sum": self.d_sum,
            "dropout": self.dropout,
            "max_len": self.max_len,
            "mlp_ratio": self.mlp_ratio,
            "summary_mode": self.summary_mode,
            "subject_mode": self.subject_mode,
            "summary_sigma_s": self.summary_sigma_s,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SubjectHead:
    e: Tensor
    w_out: Tensor
    b_out: Tensor


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng):
        self.attn = MultiHeadAttention(cfg.d, cfg.heads, rng, cfg.dropout)
        self.ln1 = LayerNorm(cfg.d)
        self.ff = FeedForward(cfg.d, rng, cfg.dropout, cfg.mlp_ratio)
        self.ln2 = LayerNorm(cfg.d)

    def __call__(self, h, pos, mask, rng, training):
        h = ag.add(h, pos)
        h = self.ln1(ag.add(h, self.attn(h, h, mask, rng, training)))
        return self.ln2(ag.add(h, self.ff(h, rng, training)))

    def params(self):
        out = {}
        out.update(collect_params("attn", self.attn))
        out.update(collect_params("ln1", self.ln1))
        out.update(collect_params("ff", self.ff))
        out.update(collect_params("ln2", self.ln2))
        return out


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng):
        self.self_attn = MultiHeadAttention(cfg.d, cfg.heads, rng, cfg.dropout)
        self.ln1 = LayerNorm(cfg.d)
        self.cross_stim = MultiHeadAttention(cfg.d, cfg.heads, rng, cfg.dropout)
        self.ln2 = LayerNorm(cfg.d)
        self.with_desc = cfg.summary_mode == "cross_attention"
        if self.with_desc:
            self.cross_desc = MultiHeadAttention(cfg.d, cfg.heads, rng, cfg.dropout)
            self.ln3 = LayerNorm(cfg.d)
        self.ff = FeedForward(cfg.d, rng, cfg.dropout, cfg.mlp_ratio)
        self.ln4 = LayerNorm(cfg.d)

    def __call__(
        self,
        z,
        h_enc,
        summary,
        causal: AttentionMask,
        stim_mask: AttentionMask,
        desc_mask: AttentionMask | None,
        rng,
        training,
        skip_cross_stim=False,
        skip_cross_desc=False,
    ):
        z = self.ln1(ag.add(z, self.self_attn(z, z, causal, rng, training)))
        if not skip_cross_stim:
            z = self.ln2(ag.add(z, self.cross_stim(z, h_enc, stim_mask, rng, training)))
        if self.with_desc and not skip_cross_desc:
            z = self.ln3(ag.add(z, self.cross_desc(z, summary, desc_mask, rng, training)))
        return self.ln4(ag.add(z, self.ff(z, rng, training)))

    def params(self):
        out = {}
        out.update(collect_params("self_attn", self.self_attn))
        out.update(collect_params("ln1", self.ln1))
        out.update(collect_params("cross_stim", self.cross_stim))
        out.update(collect_params("ln2", self.ln2))
        if self.with_desc:
            out.update(collect_params("cross_desc", self.cross_desc))
            out.update(collect_params("ln3", self.ln3))
        out.update(collect_params("ff", self.ff))
        out.update(collect_params("ln4", self.ln4))
        return out


class EncodingModel:
    """Shared encoder/decoder plus per-subject embeddings and output heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, subjects=()):
        self.cfg = cfg
        d, p = cfg.d, cfg.parcels
        self.fuse = Linear(cfg.fuse_width, d, rng)
        self.enc_pos = RelPosTable(cfg.max_len, d)
        self.enc_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.l_enc)]
        self.in_proj = Linear(p, d, rng)  # W_dec, b_dec
        self.dec_pos = RelPosTable(cfg.max_len, d)
        self.sum_proj = Linear(cfg.d_sum, d, rng)
        self.cat_proj = Linear(2 * d, d, rng) if cfg.subject_mode == "concat" else None
        self.dec_layers = [DecoderLayer(cfg, rng) for _ in range(cfg.l_dec)]
        self.bos = ag.parameter(np.zeros(p))
        self.subjects: dict[str, SubjectHead] = {}
        for sid in subjects:
            self.add_subject(sid, rng)

    # -- subjects ----------------------------------------------------------

    def add_subject(self, subject_id: str, rng: np.random.Generator) -> list[str]:
        """Register a subject head; returns its parameter names."""
        if subject_id in self.subjects:
            raise DuplicateSubjectError(f"subject {subject_id!r} already registered")
        d, p = self.cfg.d, self.cfg.parcels
        self.subjects[subject_id] = SubjectHead(
            e=ag.parameter(uniform_init(rng, d, (d,))),
            w_out=ag.parameter(uniform_init(rng, d, (d, p))),
            b_out=ag.parameter(np.zeros(p)),
        )
        return self.subject_param_names(subject_id)

    def subject_param_names(self, subject_id: str) -> list[str]:
        return [f"subject.{subject_id}.{k}" for k in ("e", "w_out", "b_out")]

    def head(self, subject_id: str) -> SubjectHead:
        try:
            return self.subjects[subject_id]
        except KeyError:
            raise SubjectNotFoundError(
                f"subject {subject_id!r} not in checkpoint (have {sorted(self.subjects)})"
            ) from None

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"bos": self.bos}
        out.update(collect_params("encoder.fuse", self.fuse))
        out.update(collect_params("encoder.pos", self.enc_pos))
        for i, layer in enumerate(self.enc_layers):
            out.update(collect_params(f"encoder.layers.{i}", layer))
        out.update(collect_params("decoder.in_proj", self.in_proj))
        out.update(collect_params("decoder.pos", self.dec_pos))
        out.update(collect_params("decoder.sum_proj", self.sum_proj))
        if self.cat_proj is not None:
            out.update(collect_params("decoder.cat_proj", self.cat_proj))
        for i, layer in enumerate(self.dec_layers):
            out.update(collect_params(f"decoder.layers.{i}", layer))
        for sid in sorted(self.subjects):
            head = self.subjects[sid]
            out[f"subject.{sid}.e"] = head.e
            out[f"subject.{sid}.w_out"] = head.w_out
            out[f"subject.{sid}.b_out"] = head.b_out
        return out

    def set_params(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ConfigError(
                f"parameter name mismatch: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}"
            )
        for name, p in params.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name}: shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.copy()

    # -- forward passes ------------------------------------------------------

    def fuse_modalities(self, slices) -> Tensor:
        """Concatenate per-TR feature slices across modalities and project to d.

        `slices` is a sequence of (..., T, D_m) arrays sharing all leading
        dims; their concatenation must match the configured fuse width.
        """
        arrays = [np.asarray(s, dtype=np.float64) for s in slices]
        t_lens = {a.shape[-2] for a in arrays}
        if len(t_lens) != 1:
            raise ContractError(f"modal slices disagree on T: {sorted(t_lens)}")
        x = np.concatenate(arrays, axis=-1)
        if x.shape[-1] != self.cfg.fuse_width:
            raise ConfigError(
                f"concatenated width {x.shape[-1]} != configured {self.cfg.fuse_width}"
            )
        return self.fuse(Tensor(x))

    def encode(self, feats, rng=None, training: bool = False) -> Tensor:
        """Causal encoder over fused features (B, T, fuse_width) -> (B, T, d)."""
        x = ag.as_tensor(feats)
        if x.ndim == 2:
            x = ag.reshape(x, (1,) + x.data.shape)
        t = x.data.shape[1]
        if t > self.cfg.max_len:
            raise ConfigError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        h = self.fuse(x)
        pos = self.enc_pos.slice(0, t)
        mask = AttentionMask("causal", t, t)
        for layer in self.enc_layers:
            h = layer(h, pos, mask, rng, training)
        return h

    def project_summary(self, summary_emb) -> Tensor:
        emb = np.asarray(summary_emb, dtype=np.float64)
        if emb.ndim == 2:
            emb = emb[None, :, :]
        if emb.shape[1] < 1:
            raise ConfigError("summary attention needs at least one sentence "
                              "(use a single zero-sentence placeholder)")
        if emb.shape[-1] != self.cfg.d_sum:
            raise ConfigError(f"summary width {emb.shape[-1]} != configured d_sum {self.cfg.d_sum}")
        return self.sum_proj(Tensor(emb))

    def decode_tf(
        self,
        y_in,
        h_enc,
        summary_emb,
        subject_id: str,
        rng=None,
        training: bool = False,
        skip_cross_stim: bool = False,
        skip_cross_desc: bool = False,
    ) -> Tensor:
        """Teacher-forced decoder pass.

        `y_in` is the (B, W, P) sequence of previous outputs, row 0 being the
        BOS vector (use `bos_inputs` to build it with a live gradient path).
        Returns (B, W, P) predictions through the subject's head.
        """
        head = self.head(subject_id)
        y = ag.as_tensor(y_in)
        if y.ndim == 2:
            y = ag.reshape(y, (1,) + y.data.shape)
        b, w, p = y.data.shape
        if p != self.cfg.parcels:
            raise ContractError(f"y_in parcel width {p} != configured {self.cfg.parcels}")
        if w > self.cfg.max_len:
            raise ConfigError(f"window length {w} exceeds max_len {self.cfg.max_len}")
        h = ag.as_tensor(h_enc)
        if h.ndim == 2:
            h = ag.reshape(h, (1,) + h.data.shape)
        t_enc = h.data.shape[1]

        ytil = self.in_proj(y)
        if self.cfg.subject_mode == "add":
            z = ag.add(ytil, head.e)
        else:
            e_b = ag.add(Tensor(np.zeros((b, w, self.cfg.d))), head.e)
            z = self.cat_proj(ag.concat([ytil, e_b], axis=-1))
        z = ag.add(z, self.dec_pos.slice(0, w))

        causal = AttentionMask("causal", w, w)
        stim_mask = AttentionMask("full", w, t_enc)
        summary = None
        desc_mask = None
        if self.cfg.summary_mode == "cross_attention":
            if summary_emb is None:
                summary_emb = np.zeros((1, self.cfg.d_sum))
            summary = self.project_summary(summary_emb)
            desc_mask = AttentionMask("full", w, summary.data.shape[1])
        for layer in self.dec_layers:
            z = layer(
                z,
                h,
                summary,
                causal,
                stim_mask,
                desc_mask,
                rng,
                training,
                skip_cross_stim=skip_cross_stim,
                skip_cross_desc=skip_cross_desc,
            )
        return ag.add(ag.matmul(z, head.w_out), head.b_out)

    def bos_inputs(self, y_rest: np.ndarray | None, batch: int) -> Tensor:
        """Assemble decoder inputs [BOS, y_rest...] with gradient flow to BOS."""
        p = self.cfg.parcels
        row0 = ag.add(Tensor(np.zeros((batch, 1, p))), ag.reshape(self.bos, (1, 1, p)))
        if y_rest is None:
            return row0
        rest = np.asarray(y_rest, dtype=np.float64)
        if rest.shape[0] != batch or rest.shape[2] != p:
            raise ContractError(f"y_rest shape {rest.shape} inconsistent with batch {batch}, P {p}")
        return ag.concat([row0, Tensor(rest)], axis=1)

    def generate(self, h_enc, summary_emb, subject_id: str, steps: int) -> np.ndarray:
        """Free-running decoding: each prediction is fed back as the next
        input. Dropout is off; the result is bit-identical to a teacher-forced
        pass over the model's own outputs because each iteration *is* that
        pass on a fixed-shape buffer (causality keeps filled rows stable).
        """
        if steps < 1:
            raise ContractError(f"steps must be >= 1, got {steps}")
        h = ag.as_tensor(h_enc)
        if h.ndim == 2:
            h = ag.reshape(h, (1,) + h.data.shape)
        b = h.data.shape[0]
        with no_grad():
            y_in = np.zeros((b, steps, self.cfg.parcels))
            y_in[:, 0, :] = self.bos.data
            out = None
            for t in range(steps):
                out = self.decode_tf(Tensor(y_in), h, summary_emb, subject_id).data
                if t + 1 < steps:
                    y_in[:, t + 1, :] = out[:, t, :]
        return out


def adapt_new_subject(
    model: EncodingModel, subject_id: str, rng: np.random.Generator
) -> set[str]:
    """Register a new subject and return the trainable-parameter mask: only
    the fresh head and embedding train; every shared tensor stays frozen.

    The fresh tensors start at the population mean of the existing subjects
    (an "average subject" already lands in the trunk's trained regime, so
    few-shot personalization converges fast); with no existing subjects the
    init falls back to random.
    """
    existing = [model.subjects[s] for s in sorted(model.subjects)]
    names = model.add_subject(subject_id, rng)
    if existing:
        head = model.subjects[subject_id]
        head.e.data = np.mean([h.e.data for h in existing], axis=0)
        head.w_out.data = np.mean([h.w_out.data for h in existing], axis=0)
        head.b_out.data = np.mean([h.b_out.data for h in existing], axis=0)
    return set(names)
