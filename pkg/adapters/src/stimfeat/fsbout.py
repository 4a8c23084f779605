"""FSB writing and manifest emission against the primary toolkit's formats.

The file format is the interface: magic "ALGF", u32 version 1, u64 rows,
u64 cols, u8 dtype (1 = float32), 7 zero bytes, float32 row-major payload.
This module implements it independently so the exporters do not import the
consumer package.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sIQQB7s")
MAGIC = b"ALGF"
VERSION = 1
DTYPE_FLOAT32 = 1


def write_fsb(path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"FSB stores 2-D matrices, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1], DTYPE_FLOAT32, b"\0" * 7))
        fh.write(m.tobytes())


def write_feature_fragment(
    out_dir,
    session_id: str,
    features: dict[str, np.ndarray],
    summary: tuple[np.ndarray, np.ndarray] | None = None,
    tr_seconds: float = 1.5,
) -> Path:
    """Write feature FSB files plus a manifest fragment.

    The fragment carries everything the primary manifest needs except the
    fMRI paths (which come from the scanner side); merge_fragment() builds
    the full manifest once those are known.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for modality, matrix in sorted(features.items()):
        rel = f"{session_id}_{modality}.fsb"
        write_fsb(out_dir / rel, matrix)
        paths[modality] = rel
    doc = {"session_id": session_id, "tr_seconds": tr_seconds, "features": paths}
    if summary is not None:
        emb, anchors = summary
        rel = f"{session_id}_summary.fsb"
        write_fsb(out_dir / rel, emb)
        doc["summary"] = {"path": rel, "anchors_seconds": [float(a) for a in anchors]}
    fragment = out_dir / f"{session_id}_features.json"
    fragment.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return fragment


def merge_fragment(
    fragment_path,
    fmri: dict[str, str],
    manifest_path,
    split: str = "train",
) -> Path:
    """Combine a feature fragment with fMRI paths into a dataset manifest in
    the primary schema, creating or extending the manifest file."""
    fragment = json.loads(Path(fragment_path).read_text(encoding="utf-8"))
    manifest_path = Path(manifest_path)
    if manifest_path.exists():
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    else:
        doc = {"tr_seconds": fragment["tr_seconds"], "sessions": []}
    session = {
        "session_id": fragment["session_id"],
        "split": split,
        "features": fragment["features"],
        "fmri": dict(fmri),
    }
    if "summary" in fragment:
        session["summary"] = fragment["summary"]
    doc["sessions"].append(session)
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path
