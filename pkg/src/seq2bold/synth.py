"""Synthetic session generator for desk-scale verification.

The ground truth is a fixed linear readout of causally smoothed,
delay-shifted stimulus features, plus a per-subject linear perturbation and
i.i.d. Gaussian noise. Readout matrices are persisted so tests can score a
noise-free ceiling against the generated fMRI.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import fsb
from .errors import ContractError
from .manifest import (
    Manifest,
    SessionManifest,
    load_manifest,
    save_manifest,
)

SMOOTH_WIDTH = 4  # moving-average TRs standing in for an HRF
FEATURE_SMOOTH_SIGMA = 3.0  # TRs; slow features keep the readout forgiving of attention offsets


@dataclass
class SynthTruth:
    """Persisted generative parameters of one synthetic session."""

    delay: int
    smooth_width: int
    readout: dict[str, np.ndarray]  # subject -> (D_total, P)
    bias: dict[str, np.ndarray]  # subject -> (P,)


def causal_moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Mean over the trailing `width` rows (partial sums at the left edge)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.cumsum(x, axis=0)
    out = c.copy()
    out[width:] = c[width:] - c[:-width]
    denom = np.minimum(np.arange(1, x.shape[0] + 1), width)
    return out / denom[:, None]


def delay_shift(x: np.ndarray, delay: int) -> np.ndarray:
    """x[t - delay] with zero padding for t < delay."""
    if delay == 0:
        return x
    out = np.zeros_like(x)
    out[delay:] = x[:-delay]
    return out


def truth_prediction(features: np.ndarray, truth: SynthTruth, subject_id: str) -> np.ndarray:
    """Noise-free fMRI implied by the persisted readout for given raw features."""
    smoothed = causal_moving_average(np.asarray(features, dtype=np.float64), truth.smooth_width)
    shifted = delay_shift(smoothed, truth.delay)
    return shifted @ truth.readout[subject_id] + truth.bias[subject_id]


def synth_session(
    out_dir,
    *,
    t_len: int,
    dims: tuple[int, ...] = (10, 6),
    parcels: int = 20,
    subjects: int = 2,
    noise_sd: float = 0.1,
    seed: int = 0,
    readout_seed: int | None = None,
    session_id: str | None = None,
    split: str = "train",
    tr_seconds: float = 1.5,
    delay: int = 5,
    subject_scale: float = 0.3,
    feature_smooth_sigma: float = FEATURE_SMOOTH_SIGMA,
    d_sum: int = 8,
    append: bool = False,
) -> Path:
    """Generate one synthetic session and write FSB files plus a manifest.

    `readout_seed` (default: `seed`) controls only the readout family, so
    several sessions generated with different seeds but one readout_seed
    share their subject readouts and form a coherent multi-session dataset.
    Returns the manifest path.
    """
    if t_len < 1 or parcels < 1 or subjects < 1 or any(d < 1 for d in dims):
        raise ContractError("t_len, parcels, subjects, and all dims must be >= 1")
    if noise_sd < 0:
        raise ContractError(f"noise_sd must be >= 0, got {noise_sd}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    session_id = session_id or f"synth-{seed:04d}"
    subject_ids = [f"sub{j + 1:02d}" for j in range(subjects)]
    d_total = int(sum(dims))

    # Readout family first, from its own stream, so it is independent of the
    # per-session seed.
    rng_readout = np.random.default_rng(
        np.random.SeedSequence((int(readout_seed if readout_seed is not None else seed), 1))
    )
    w_base = rng_readout.normal(size=(d_total, parcels)) / np.sqrt(d_total)
    readout, bias = {}, {}
    for sid in subject_ids:
        delta = rng_readout.normal(size=(d_total, parcels)) / np.sqrt(d_total)
        readout[sid] = w_base + subject_scale * delta
        bias[sid] = 0.1 * rng_readout.normal(size=parcels)

    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 2)))
    feats = {}
    for i, d_m in enumerate(dims):
        raw = rng.normal(size=(t_len, d_m))
        smooth = gaussian_filter1d(raw, feature_smooth_sigma, axis=0, mode="nearest")
        smooth -= smooth.mean(axis=0)
        sd = smooth.std(axis=0)
        smooth /= np.maximum(sd, 1e-6)
        feats[f"m{i}"] = smooth

    x_all = np.concatenate([feats[f"m{i}"] for i in range(len(dims))], axis=1)
    clean_input = delay_shift(causal_moving_average(x_all, SMOOTH_WIDTH), delay)

    summary_sentences = max(2, t_len // 40)
    summary_emb = rng.normal(size=(summary_sentences, d_sum))
    anchors = ((np.arange(summary_sentences) + 0.5) * t_len * tr_seconds / summary_sentences)

    prefix = session_id
    feature_paths = {}
    for name, mat in feats.items():
        rel = f"{prefix}_{name}.fsb"
        fsb.write_matrix(out_dir / rel, mat)
        feature_paths[name] = rel
    fmri_paths = {}
    for sid in subject_ids:
        y = clean_input @ readout[sid] + bias[sid]
        if noise_sd > 0:
            y = y + noise_sd * rng.normal(size=y.shape)
        rel = f"{prefix}_{sid}.fsb"
        fsb.write_matrix(out_dir / rel, y)
        fmri_paths[sid] = rel
    summary_rel = f"{prefix}_summary.fsb"
    fsb.write_matrix(out_dir / summary_rel, summary_emb)

    truth_dir = out_dir / "truth"
    truth_dir.mkdir(exist_ok=True)
    truth_doc = {"delay": delay, "smooth_width": SMOOTH_WIDTH, "subjects": {}}
    for sid in subject_ids:
        w_rel = f"{prefix}_{sid}_readout.fsb"
        b_rel = f"{prefix}_{sid}_bias.fsb"
        fsb.write_matrix(truth_dir / w_rel, readout[sid])
        fsb.write_matrix(truth_dir / b_rel, bias[sid].reshape(1, -1))
        truth_doc["subjects"][sid] = {"readout": w_rel, "bias": b_rel}
    (truth_dir / f"{prefix}_truth.json").write_text(
        json.dumps(truth_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    entry = SessionManifest(
        session_id=session_id,
        split=split,
        features=feature_paths,
        fmri=fmri_paths,
        summary_path=summary_rel,
        summary_anchors=[float(a) for a in anchors],
    )
    manifest_path = out_dir / "manifest.json"
    if append and manifest_path.exists():
        manifest = load_manifest(manifest_path)
        if any(s.session_id == session_id for s in manifest.sessions):
            raise ContractError(f"session {session_id!r} already present in {manifest_path}")
        manifest.sessions.append(entry)
    else:
        manifest = Manifest(tr_seconds=tr_seconds, sessions=[entry], base_dir=out_dir)
    save_manifest(manifest, manifest_path)
    return manifest_path


def load_truth(out_dir, session_id: str) -> SynthTruth:
    """Read back the persisted generative parameters of a synthetic session."""
    truth_dir = Path(out_dir) / "truth"
    doc = json.loads((truth_dir / f"{session_id}_truth.json").read_text(encoding="utf-8"))
    readout = {}
    bias = {}
    for sid, files in doc["subjects"].items():
        readout[sid] = fsb.read_matrix(truth_dir / files["readout"]).astype(np.float64)
        bias[sid] = fsb.read_matrix(truth_dir / files["bias"]).astype(np.float64)[0]
    return SynthTruth(
        delay=int(doc["delay"]),
        smooth_width=int(doc["smooth_width"]),
        readout=readout,
        bias=bias,
    )
