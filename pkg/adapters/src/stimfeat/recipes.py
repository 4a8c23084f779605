"""Extraction recipes: which backbone, which layers, how to pool.

Widths are fixed by the recipes; exporters must produce exactly these or
fail loudly. Model identifiers are defaults, not requirements: any
checkpoint with matching hidden sizes can be substituted.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ExtractionRecipe:
    modality: str
    model_name: str
    layers: tuple[int, ...]
    pooling: str
    context: str
    width: int


RECIPES: dict[str, ExtractionRecipe] = {
    "visual": ExtractionRecipe(
        modality="visual",
        model_name="MCG-NJU/videomae-base",
        layers=(12,),
        pooling="mean over final-layer tokens per frame",
        context="current-frame embedding ++ running mean of all preceding frames",
        width=1536,
    ),
    "audio": ExtractionRecipe(
        modality="audio",
        model_name="facebook/hubert-base-ls960",
        layers=(3, 9),
        pooling="mean over model frames within each TR, per layer, concatenated",
        context="frame-level only (no temporal history)",
        width=1536,
    ),
    "language": ExtractionRecipe(
        modality="language",
        model_name="Qwen/Qwen1.5-0.5B",
        layers=(12,),
        pooling="mean over all context tokens ++ mean over the last 10 tokens",
        context="all utterances up to the TR, truncated to the last 2048 tokens",
        width=2048,
    ),
    "crossmodal": ExtractionRecipe(
        modality="crossmodal",
        model_name="BridgeTower/bridgetower-base",
        layers=(-1,),
        pooling="pooler output ([CLS] after fusion)",
        context="one frame plus its concurrent utterance per TR",
        width=1536,
    ),
    "summary": ExtractionRecipe(
        modality="summary",
        model_name="bert-base-uncased",
        layers=(-1,),
        pooling="[CLS] per sentence",
        context="narrative summary split into sentences",
        width=768,
    ),
}

CONTEXT_TOKENS = 2048  # language context truncation
LOCAL_TOKENS = 10  # size of the "recent tokens" pool
