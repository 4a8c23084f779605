"""Per-TR feature extraction following the fixed recipes.

Every exporter maps session media onto a (T, width) float matrix with
T = ceil(duration / tr_seconds). TR buckets that contain no media samples
(possible when the frame interval exceeds the TR) carry the previous
bucket's pooled value forward; a leading empty bucket yields zeros.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .backbones import (
    AudioBackbone,
    CrossModalBackbone,
    SentenceBackbone,
    TextBackbone,
    VideoBackbone,
)
from .recipes import CONTEXT_TOKENS, LOCAL_TOKENS, RECIPES

log = logging.getLogger(__name__)


@dataclass
class Utterance:
    onset_s: float
    text: str


def _tr_count(duration_s: float, tr_seconds: float) -> int:
    if duration_s <= 0 or tr_seconds <= 0:
        raise ValueError("duration and tr_seconds must be positive")
    return int(np.ceil(duration_s / tr_seconds))


def _bucket(times: np.ndarray, t: int, tr_seconds: float) -> np.ndarray:
    return np.flatnonzero((times >= t * tr_seconds) & (times < (t + 1) * tr_seconds))


def extract_visual(
    frames: np.ndarray,
    fps: float,
    tr_seconds: float,
    backbone: VideoBackbone,
) -> np.ndarray:
    """Current-TR mean frame embedding concatenated with the running mean of
    all preceding frames; the first TR duplicates the current half (there is
    no history yet)."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise ValueError(f"expected (n_frames, H, W, 3) video, got {frames.shape}")
    emb = backbone.frame_embeddings(frames)
    times = (np.arange(len(frames)) + 0.5) / fps
    t_len = _tr_count(len(frames) / fps, tr_seconds)
    out = np.zeros((t_len, 2 * backbone.dim))
    cumsum = np.cumsum(emb, axis=0)
    current = np.zeros(backbone.dim)
    for t in range(t_len):
        idx = _bucket(times, t, tr_seconds)
        if idx.size:
            current = emb[idx].mean(axis=0)
        n_before = int(np.searchsorted(times, t * tr_seconds))
        past = cumsum[n_before - 1] / n_before if n_before > 0 and t > 0 else current
        out[t, : backbone.dim] = current
        out[t, backbone.dim :] = past
    assert out.shape[1] == RECIPES["visual"].width
    return out


def extract_audio(
    wave: np.ndarray,
    sample_rate: int,
    tr_seconds: float,
    backbone: AudioBackbone,
) -> np.ndarray:
    """Recipe-layer hidden states mean-pooled within each TR and
    concatenated across layers; strictly frame-level (no history)."""
    wave = np.asarray(wave)
    if wave.ndim != 1 or len(wave) == 0:
        raise ValueError("expected a 1-D mono waveform")
    states = backbone.layer_states(wave, sample_rate)
    n_frames = len(next(iter(states.values())))
    times = (np.arange(n_frames) + 0.5) / backbone.frame_rate
    t_len = _tr_count(len(wave) / sample_rate, tr_seconds)
    width = backbone.dim * len(backbone.layers)
    out = np.zeros((t_len, width))
    prev = np.zeros(width)
    for t in range(t_len):
        idx = _bucket(times, t, tr_seconds)
        if idx.size:
            prev = np.concatenate(
                [states[layer][idx].mean(axis=0) for layer in backbone.layers]
            )
        out[t] = prev
    assert out.shape[1] == RECIPES["audio"].width
    return out


def extract_language(
    utterances: list[Utterance],
    tr_seconds: float,
    duration_s: float,
    backbone: TextBackbone,
    context_tokens: int = CONTEXT_TOKENS,
    local_tokens: int = LOCAL_TOKENS,
) -> np.ndarray:
    """Mean over the (truncated) rolling context plus mean over its last few
    tokens; TRs before the first utterance carry zeros."""
    utterances = sorted(utterances, key=lambda u: u.onset_s)
    t_len = _tr_count(duration_s, tr_seconds)
    out = np.zeros((t_len, 2 * backbone.dim))
    onsets = np.array([u.onset_s for u in utterances])
    token_lists = [backbone.tokenize(u.text) for u in utterances]
    for t in range(t_len):
        n_heard = int(np.searchsorted(onsets, (t + 1) * tr_seconds, side="right"))
        if n_heard == 0:
            continue
        tokens: list[str] = [tok for lst in token_lists[:n_heard] for tok in lst]
        if not tokens:
            continue
        tokens = tokens[-context_tokens:]
        states = backbone.token_states(tokens)
        out[t, : backbone.dim] = states.mean(axis=0)
        out[t, backbone.dim :] = states[-local_tokens:].mean(axis=0)
    assert out.shape[1] == RECIPES["language"].width
    return out


def extract_crossmodal(
    frames: np.ndarray,
    fps: float,
    utterances: list[Utterance],
    tr_seconds: float,
    backbone: CrossModalBackbone,
) -> np.ndarray:
    """Fused frame/utterance embedding per TR: the TR's last frame paired
    with its most recent utterance (empty string before the first one)."""
    frames = np.asarray(frames)
    utterances = sorted(utterances, key=lambda u: u.onset_s)
    onsets = np.array([u.onset_s for u in utterances])
    times = (np.arange(len(frames)) + 0.5) / fps
    t_len = _tr_count(len(frames) / fps, tr_seconds)
    out = np.zeros((t_len, backbone.dim))
    frame_i = 0
    for t in range(t_len):
        idx = _bucket(times, t, tr_seconds)
        if idx.size:
            frame_i = int(idx[-1])
        n_heard = int(np.searchsorted(onsets, (t + 1) * tr_seconds, side="right"))
        text = utterances[n_heard - 1].text if n_heard else ""
        out[t] = backbone.fused_embedding(frames[frame_i], text)
    assert out.shape[1] == RECIPES["crossmodal"].width
    return out


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text.strip()) if s.strip()]


def embed_summary(
    text: str,
    duration_s: float,
    backbone: SentenceBackbone,
) -> tuple[np.ndarray, np.ndarray]:
    """Sentence embeddings with anchors spread evenly over the session
    (alignment is approximate by construction). Empty text yields one zero
    sentence anchored mid-session."""
    sentences = split_sentences(text)
    if not sentences:
        log.warning("empty summary: emitting a single zero-sentence placeholder")
        return np.zeros((1, backbone.dim)), np.array([duration_s / 2.0])
    emb = backbone.sentence_embeddings(sentences)
    s = len(sentences)
    anchors = (np.arange(s) + 0.5) * duration_s / s
    return emb, anchors
