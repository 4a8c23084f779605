"""Session-level export: run every recipe over one session's media and
write the FSB files plus the manifest fragment."""
from __future__ import annotations

import logging

import numpy as np

from .backbones import BackboneSet
from .exporters import (
    Utterance,
    embed_summary,
    extract_audio,
    extract_crossmodal,
    extract_language,
    extract_visual,
)
from .fsbout import write_feature_fragment

log = logging.getLogger(__name__)


def export_session(
    out_dir,
    session_id: str,
    *,
    frames: np.ndarray,
    fps: float,
    wave: np.ndarray,
    sample_rate: int,
    utterances: list[Utterance],
    summary_text: str = "",
    tr_seconds: float = 1.5,
    backbones: BackboneSet,
):
    """Extract all four feature modalities plus the summary embedding and
    write them in the primary toolkit's formats.

    Modalities whose media imply different durations are clipped to the
    shortest TR count (logged); the summary anchors span the clipped
    duration. Returns the manifest-fragment path.
    """
    duration_lang = max(
        len(frames) / fps,
        len(wave) / sample_rate,
        max((u.onset_s for u in utterances), default=0.0) + tr_seconds,
    )
    features = {
        "visual": extract_visual(frames, fps, tr_seconds, backbones.video),
        "audio": extract_audio(wave, sample_rate, tr_seconds, backbones.audio),
        "language": extract_language(
            utterances, tr_seconds, duration_lang, backbones.text
        ),
        "crossmodal": extract_crossmodal(
            frames, fps, utterances, tr_seconds, backbones.crossmodal
        ),
    }
    t_lens = {m: f.shape[0] for m, f in features.items()}
    t_len = min(t_lens.values())
    if max(t_lens.values()) != t_len:
        log.warning(
            "session %s: modality TR counts %s clipped to common T=%d",
            session_id,
            t_lens,
            t_len,
        )
        features = {m: f[:t_len] for m, f in features.items()}
    summary = embed_summary(summary_text, t_len * tr_seconds, backbones.sentence)
    return write_feature_fragment(
        out_dir, session_id, features, summary=summary, tr_seconds=tr_seconds
    )
