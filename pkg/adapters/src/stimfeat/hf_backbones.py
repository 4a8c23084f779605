"""Hugging Face implementations of the backbone interfaces.

Requires the `models` extra (torch + transformers) and network/cache access
to the pretrained weights; everything degrades to a clear ImportError
otherwise. The deterministic stubs in `backbones` cover offline use and
testing.
"""
from __future__ import annotations

import numpy as np

try:
    import torch
    from transformers import (
        AutoModel,
        AutoModelForCausalLM,
        AutoProcessor,
        AutoTokenizer,
    )

    _HF_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without the extra
    _HF_AVAILABLE = False

from .recipes import RECIPES


def _require_hf():
    if not _HF_AVAILABLE:
        raise ImportError(
            "transformers/torch are not installed; install stimfeat[models] "
            "or use the deterministic stub backbones"
        )


class HFVideoBackbone:
    """VideoMAE: per-frame embedding = mean over final-layer tokens.

    VideoMAE consumes 16-frame clips; each session frame is embedded from
    the clip ending at it (repeating the first frame at the session start).
    """

    def __init__(self, model_name: str | None = None, device: str = "cpu"):
        _require_hf()
        name = model_name or RECIPES["visual"].model_name
        self.processor = AutoProcessor.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name).to(device).eval()
        self.device = device
        self.dim = self.model.config.hidden_size
        self.clip_len = getattr(self.model.config, "num_frames", 16)

    @torch.no_grad()
    def frame_embeddings(self, frames: np.ndarray) -> np.ndarray:
        rows = []
        frames = np.asarray(frames)
        for i in range(len(frames)):
            lo = max(0, i + 1 - self.clip_len)
            clip = list(frames[lo : i + 1])
            while len(clip) < self.clip_len:
                clip.insert(0, clip[0])
            inputs = self.processor(list(clip), return_tensors="pt").to(self.device)
            hidden = self.model(**inputs).last_hidden_state  # (1, tokens, dim)
            rows.append(hidden.mean(dim=1)[0].cpu().numpy())
        return np.stack(rows)


class HFAudioBackbone:
    """HuBERT hidden states from the recipe layers (3 and 9)."""

    def __init__(self, model_name: str | None = None, device: str = "cpu"):
        _require_hf()
        name = model_name or RECIPES["audio"].model_name
        self.processor = AutoProcessor.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name).to(device).eval()
        self.device = device
        self.dim = self.model.config.hidden_size
        self.layers = RECIPES["audio"].layers
        # HuBERT's convolutional frontend yields ~50 frames/s at 16 kHz.
        self.frame_rate = 50.0

    @torch.no_grad()
    def layer_states(self, wave: np.ndarray, sample_rate: int) -> dict[int, np.ndarray]:
        inputs = self.processor(
            np.asarray(wave, dtype=np.float32),
            sampling_rate=sample_rate,
            return_tensors="pt",
        ).to(self.device)
        out = self.model(**inputs, output_hidden_states=True)
        # hidden_states[k] is the output of encoder layer k (0 = embeddings).
        return {
            layer: out.hidden_states[layer][0].cpu().numpy() for layer in self.layers
        }


class HFTextBackbone:
    """Causal LM (Qwen by default): layer-12 hidden states per token."""

    def __init__(self, model_name: str | None = None, device: str = "cpu", layer: int = 12):
        _require_hf()
        name = model_name or RECIPES["language"].model_name
        self.tokenizer = AutoTokenizer.from_pretrained(name)
        self.model = AutoModelForCausalLM.from_pretrained(name).to(device).eval()
        self.device = device
        self.layer = layer
        self.dim = self.model.config.hidden_size

    def tokenize(self, text: str) -> list[str]:
        return self.tokenizer.tokenize(text)

    @torch.no_grad()
    def token_states(self, tokens: list[str]) -> np.ndarray:
        ids = self.tokenizer.convert_tokens_to_ids(tokens)
        batch = torch.tensor([ids], device=self.device)
        out = self.model(batch, output_hidden_states=True)
        return out.hidden_states[self.layer][0].cpu().numpy()


class HFCrossModalBackbone:
    """BridgeTower pooler output ([CLS] after visual/text fusion)."""

    def __init__(self, model_name: str | None = None, device: str = "cpu"):
        _require_hf()
        name = model_name or RECIPES["crossmodal"].model_name
        self.processor = AutoProcessor.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name).to(device).eval()
        self.device = device
        self.dim = RECIPES["crossmodal"].width

    @torch.no_grad()
    def fused_embedding(self, frame: np.ndarray, text: str) -> np.ndarray:
        inputs = self.processor(
            images=np.asarray(frame), text=text or "", return_tensors="pt"
        ).to(self.device)
        out = self.model(**inputs)
        return out.pooler_output[0].cpu().numpy()


class HFSentenceBackbone:
    """BERT [CLS] embedding per sentence."""

    def __init__(self, model_name: str | None = None, device: str = "cpu"):
        _require_hf()
        name = model_name or RECIPES["summary"].model_name
        self.tokenizer = AutoTokenizer.from_pretrained(name)
        self.model = AutoModel.from_pretrained(name).to(device).eval()
        self.device = device
        self.dim = self.model.config.hidden_size

    @torch.no_grad()
    def sentence_embeddings(self, sentences: list[str]) -> np.ndarray:
        rows = []
        for sentence in sentences:
            inputs = self.tokenizer(
                sentence, return_tensors="pt", truncation=True, max_length=512
            ).to(self.device)
            out = self.model(**inputs)
            rows.append(out.last_hidden_state[0, 0].cpu().numpy())
        return np.stack(rows)
