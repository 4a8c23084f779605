"""Sliding-window construction and epoch shuffling.

Each training sample pairs an input window of w_in consecutive TRs of
stimulus features with a target window of w_out TRs of fMRI, offset by a
fixed hemodynamic delay. With stride <= w_out every target TR past the delay
is predicted by at least one window.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .manifest import SessionManifest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingWindow:
    session_id: str
    subject_id: str
    t0: int
    w_in: int
    w_out: int
    delay: int

    @property
    def input_range(self) -> range:
        return range(self.t0, self.t0 + self.w_in)

    @property
    def target_range(self) -> range:
        return range(self.t0 + self.delay, self.t0 + self.delay + self.w_out)


def window_starts(t_len: int, w_in: int, w_out: int, delay: int, stride: int) -> list[int]:
    """Start offsets t0 such that both [t0, t0+w_in) and
    [t0+delay, t0+delay+w_out) fit in [0, t_len)."""
    if w_in < 1 or w_out < 1 or stride < 1 or delay < 0:
        raise ContractError(
            f"invalid window geometry: w_in={w_in} w_out={w_out} delay={delay} stride={stride}"
        )
    span = max(w_in, delay + w_out)
    if t_len < span:
        return []
    last = (t_len - span) // stride
    return [i * stride for i in range(last + 1)]


def build_windows(
    session: SessionManifest,
    t_len: int,
    w_in: int,
    w_out: int,
    delay: int,
    stride: int,
    subjects: list[str] | None = None,
) -> list[TrainingWindow]:
    """Enumerate windows for every subject of a session. An empty result is
    not an error; sessions shorter than one window log a warning."""
    starts = window_starts(t_len, w_in, w_out, delay, stride)
    if not starts:
        log.warning(
            "session %s: length %d too short for one window (w_in=%d, w_out=%d, delay=%d)",
            session.session_id,
            t_len,
            w_in,
            w_out,
            delay,
        )
        return []
    subject_ids = subjects if subjects is not None else sorted(session.fmri)
    return [
        TrainingWindow(session.session_id, sid, t0, w_in, w_out, delay)
        for sid in subject_ids
        for t0 in starts
    ]


def shuffle_epoch(n_windows, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of window indices for one epoch.

    The (seed, epoch) pair seeds an independent PCG64 stream, so the same
    seed yields a different order every epoch yet reruns reproduce it.
    """
    if hasattr(n_windows, "__len__"):
        n_windows = len(n_windows)
    if seed < 0 or epoch < 0:
        raise ContractError("seed and epoch must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(epoch))))
    return rng.permutation(int(n_windows))
