"""Dataset manifests, sequence types, and session loading.

A manifest is a JSON file listing sessions; each session names per-modality
feature FSB files, per-subject fMRI FSB files, an optional summary (sentence
embedding FSB plus anchor times in seconds), and a split tag. All paths are
relative to the manifest's directory.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fsb
from .errors import DataError, ManifestError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class FeatureSequence:
    """One modality's per-TR feature matrix (T x D_m) for one session."""

    modality_id: str
    data: np.ndarray
    tr_seconds: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DataError(
                f"feature sequence {self.modality_id!r} must be (T>=1, D>=1), "
                f"got {self.data.shape}"
            )
        if not np.isfinite(self.data).all():
            raise DataError(f"feature sequence {self.modality_id!r} has non-finite entries")
        if not self.tr_seconds > 0:
            raise DataError(f"tr_seconds must be positive, got {self.tr_seconds}")

    @property
    def t_len(self) -> int:
        return self.data.shape[0]


@dataclass
class FmriSequence:
    """One subject's parcel time series (T x P) for one session."""

    subject_id: str
    data: np.ndarray
    tr_seconds: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise DataError(
                f"fMRI sequence for {self.subject_id!r} must be (T, P>=1), "
                f"got {self.data.shape}"
            )
        if not np.isfinite(self.data).all():
            raise DataError(f"fMRI sequence for {self.subject_id!r} has non-finite entries")
        if not self.tr_seconds > 0:
            raise DataError(f"tr_seconds must be positive, got {self.tr_seconds}")

    @property
    def t_len(self) -> int:
        return self.data.shape[0]

    @property
    def parcels(self) -> int:
        return self.data.shape[1]


@dataclass
class SummaryContext:
    """Sentence embeddings (S x d_sum) with approximate onset anchors in seconds."""

    embeddings: np.ndarray
    anchors: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DataError(f"summary embeddings must be (S>=1, d), got {self.embeddings.shape}")
        if self.anchors.shape != (self.embeddings.shape[0],):
            raise DataError("summary anchors must align 1:1 with sentences")
        if not (np.isfinite(self.embeddings).all() and np.isfinite(self.anchors).all()):
            raise DataError("summary context has non-finite entries")
        if np.any(np.diff(self.anchors) < 0):
            raise DataError("summary anchors must be non-decreasing")

    @property
    def n_sentences(self) -> int:
        return self.embeddings.shape[0]

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]


def zero_summary(d_sum: int) -> SummaryContext:
    """Single zero-sentence placeholder for sessions without a summary."""
    return SummaryContext(np.zeros((1, d_sum)), np.zeros(1))


@dataclass
class SessionManifest:
    session_id: str
    split: str
    features: dict[str, str]
    fmri: dict[str, str]
    summary_path: str | None = None
    summary_anchors: list[float] | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(
                f"session {self.session_id!r}: unknown split {self.split!r} (use {SPLITS})"
            )
        if not self.features:
            raise ManifestError(f"session {self.session_id!r}: no feature files listed")
        if not self.fmri:
            raise ManifestError(f"session {self.session_id!r}: no fMRI files listed")
        if (self.summary_path is None) != (self.summary_anchors is None):
            raise ManifestError(
                f"session {self.session_id!r}: summary path and anchors must come together"
            )


@dataclass
class Manifest:
    tr_seconds: float
    sessions: list[SessionManifest]
    base_dir: Path = field(default_factory=Path)

    def sessions_in_split(self, split: str) -> list[SessionManifest]:
        return [s for s in self.sessions if s.split == split]

    def subjects(self) -> list[str]:
        seen = sorted({sid for s in self.sessions for sid in s.fmri})
        return seen


_SESSION_KEYS = {"session_id", "split", "features", "fmri", "summary"}
_TOP_KEYS = {"tr_seconds", "sessions"}


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ManifestError(f"{path}: unknown manifest field(s) {sorted(unknown)}")
    sessions = []
    for entry in doc.get("sessions", []):
        bad = set(entry) - _SESSION_KEYS
        if bad:
            raise ManifestError(f"{path}: unknown session field(s) {sorted(bad)}")
        summary = entry.get("summary")
        sessions.append(
            SessionManifest(
                session_id=entry["session_id"],
                split=entry.get("split", "train"),
                features=dict(entry["features"]),
                fmri=dict(entry["fmri"]),
                summary_path=summary["path"] if summary else None,
                summary_anchors=list(summary["anchors_seconds"]) if summary else None,
            )
        )
    return Manifest(
        tr_seconds=float(doc.get("tr_seconds", 1.5)),
        sessions=sessions,
        base_dir=path.parent,
    )


def save_manifest(manifest: Manifest, path) -> None:
    doc = {
        "tr_seconds": manifest.tr_seconds,
        "sessions": [
            {
                "session_id": s.session_id,
                "split": s.split,
                "features": s.features,
                "fmri": s.fmri,
                **(
                    {"summary": {"path": s.summary_path, "anchors_seconds": s.summary_anchors}}
                    if s.summary_path is not None
                    else {}
                ),
            }
            for s in manifest.sessions
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_feature_sequence(path, modality_id: str | None = None, tr_seconds: float = 1.5) -> FeatureSequence:
    """Load a feature FSB file; TR and modality label come from the caller
    (the manifest), the file stores only the matrix."""
    data = fsb.read_matrix(path)
    return FeatureSequence(modality_id or Path(path).stem, data, tr_seconds)


def read_fmri_sequence(path, subject_id: str, tr_seconds: float = 1.5) -> FmriSequence:
    return FmriSequence(subject_id, fsb.read_matrix(path), tr_seconds)


@dataclass
class SessionData:
    """A fully loaded session, truncated to a common T across all sequences."""

    session_id: str
    split: str
    features: dict[str, FeatureSequence]
    fmri: dict[str, FmriSequence]
    summary: SummaryContext | None
    t_len: int
    tr_seconds: float

    @property
    def parcels(self) -> int:
        return next(iter(self.fmri.values())).parcels

    def feature_matrix(self, order: list[str] | None = None) -> np.ndarray:
        """Concatenate modalities column-wise in the given (or sorted) order."""
        order = order or sorted(self.features)
        missing = [m for m in order if m not in self.features]
        if missing:
            raise ManifestError(f"session {self.session_id!r}: missing modalities {missing}")
        return np.concatenate([self.features[m].data for m in order], axis=1)


def load_session(manifest: Manifest, entry: SessionManifest) -> SessionData:
    """Load and validate one session; sequences of unequal length are
    truncated to the common minimum with a warning."""
    base = manifest.base_dir
    features = {}
    for modality, rel in sorted(entry.features.items()):
        p = base / rel
        if not p.exists():
            raise ManifestError(f"session {entry.session_id!r}: feature file missing: {p}")
        features[modality] = read_feature_sequence(p, modality, manifest.tr_seconds)
    fmri = {}
    for subject, rel in sorted(entry.fmri.items()):
        p = base / rel
        if not p.exists():
            raise ManifestError(f"session {entry.session_id!r}: fMRI file missing: {p}")
        fmri[subject] = read_fmri_sequence(p, subject, manifest.tr_seconds)

    lengths = [seq.t_len for seq in features.values()] + [seq.t_len for seq in fmri.values()]
    t_len = min(lengths)
    if max(lengths) != t_len:
        log.warning(
            "session %s: sequence lengths %s truncated to common T=%d",
            entry.session_id,
            sorted(set(lengths)),
            t_len,
        )
        for seq in features.values():
            seq.data = seq.data[:t_len]
        for seq in fmri.values():
            seq.data = seq.data[:t_len]

    parcel_counts = {seq.parcels for seq in fmri.values()}
    if len(parcel_counts) != 1:
        raise ManifestError(
            f"session {entry.session_id!r}: subjects disagree on parcel count {parcel_counts}"
        )

    summary = None
    if entry.summary_path is not None:
        p = base / entry.summary_path
        if not p.exists():
            raise ManifestError(f"session {entry.session_id!r}: summary file missing: {p}")
        summary = SummaryContext(fsb.read_matrix(p), np.asarray(entry.summary_anchors))

    return SessionData(
        session_id=entry.session_id,
        split=entry.split,
        features=features,
        fmri=fmri,
        summary=summary,
        t_len=t_len,
        tr_seconds=manifest.tr_seconds,
    )
