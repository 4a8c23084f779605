"""Backbone interfaces and deterministic stub implementations.

Exporters only see these small interfaces; the real pretrained models live
behind them (hf_backbones). The stubs derive every embedding from a content
hash, so they are deterministic across processes and machines without any
model weights, which is what the offline test suite runs against.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


class VideoBackbone(Protocol):
    dim: int

    def frame_embeddings(self, frames: np.ndarray) -> np.ndarray:
        """(n_frames, H, W, 3) -> (n_frames, dim) token-averaged embeddings."""


class AudioBackbone(Protocol):
    dim: int
    layers: tuple[int, ...]
    frame_rate: float

    def layer_states(self, wave: np.ndarray, sample_rate: int) -> dict[int, np.ndarray]:
        """Mono waveform -> {layer: (n_model_frames, dim)} hidden states."""


class TextBackbone(Protocol):
    dim: int

    def tokenize(self, text: str) -> list[str]: ...

    def token_states(self, tokens: list[str]) -> np.ndarray:
        """(n_tokens,) -> (n_tokens, dim) hidden states of the recipe layer."""


class CrossModalBackbone(Protocol):
    dim: int

    def fused_embedding(self, frame: np.ndarray, text: str) -> np.ndarray:
        """One frame plus its utterance -> (dim,) fused pooled embedding."""


class SentenceBackbone(Protocol):
    dim: int

    def sentence_embeddings(self, sentences: list[str]) -> np.ndarray:
        """(S,) sentences -> (S, dim) embeddings."""


@dataclass
class BackboneSet:
    video: VideoBackbone
    audio: AudioBackbone
    text: TextBackbone
    crossmodal: CrossModalBackbone
    sentence: SentenceBackbone


# -- deterministic stubs -------------------------------------------------------


def _hash_vector(payload: bytes, dim: int) -> np.ndarray:
    """Unit-scale pseudo-embedding derived from a content digest."""
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim)


@dataclass
class StubVideoBackbone:
    dim: int = 768

    def frame_embeddings(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        return np.stack(
            [_hash_vector(b"video" + np.ascontiguousarray(f).tobytes(), self.dim) for f in frames]
        )


@dataclass
class StubAudioBackbone:
    dim: int = 768
    layers: tuple[int, ...] = (3, 9)
    frame_rate: float = 50.0  # model frames per second

    def layer_states(self, wave: np.ndarray, sample_rate: int) -> dict[int, np.ndarray]:
        wave = np.asarray(wave, dtype=np.float32)
        n_frames = max(1, int(len(wave) / sample_rate * self.frame_rate))
        hop = max(1, len(wave) // n_frames)
        out = {}
        for layer in self.layers:
            salt = f"audio-l{layer}".encode()
            rows = []
            for i in range(n_frames):
                chunk = wave[i * hop : (i + 1) * hop]
                rows.append(_hash_vector(salt + chunk.tobytes(), self.dim))
            out[layer] = np.stack(rows)
        return out


@dataclass
class StubTextBackbone:
    dim: int = 1024

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def token_states(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([_hash_vector(b"text" + t.encode(), self.dim) for t in tokens])


@dataclass
class StubCrossModalBackbone:
    dim: int = 1536

    def fused_embedding(self, frame: np.ndarray, text: str) -> np.ndarray:
        payload = b"fused" + np.ascontiguousarray(frame).tobytes() + text.encode()
        return _hash_vector(payload, self.dim)


@dataclass
class StubSentenceBackbone:
    dim: int = 768

    def sentence_embeddings(self, sentences: list[str]) -> np.ndarray:
        if not sentences:
            return np.zeros((0, self.dim))
        return np.stack([_hash_vector(b"sent" + s.encode(), self.dim) for s in sentences])


def stub_backbones() -> BackboneSet:
    return BackboneSet(
        video=StubVideoBackbone(),
        audio=StubAudioBackbone(),
        text=StubTextBackbone(),
        crossmodal=StubCrossModalBackbone(),
        sentence=StubSentenceBackbone(),
    )
