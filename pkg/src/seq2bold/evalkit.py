"""Challenge-style evaluation: window aggregation, per-parcel correlation,
score pooling, and report files.

Overlapping window predictions are combined by unweighted per-TR means.
Parcels whose covered series is constant (variance under the 1e-8 floor)
are flagged undefined and excluded from every average rather than scored 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, UndefinedScoreError
from .losses import VAR_FLOOR


def aggregate_overlaps(windows, t_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Average window predictions into a full (t_len, P) sequence.

    `windows` yields (target_range, (w_out, P) predictions). Returns the
    reconstruction and a boolean coverage mask; uncovered TRs hold zeros and
    must be excluded from scoring via the mask.
    """
    windows = list(windows)
    if not windows:
        raise ContractError("aggregate_overlaps needs at least one window")
    parcels = np.asarray(windows[0][1]).shape[-1]
    total = np.zeros((t_len, parcels))
    count = np.zeros(t_len, dtype=np.int64)
    for rng, preds in windows:
        preds = np.asarray(preds, dtype=np.float64)
        idx = np.asarray(list(rng), dtype=np.int64)
        if preds.shape != (len(idx), parcels):
            raise ContractError(
                f"window predictions {preds.shape} do not match range length {len(idx)} x P={parcels}"
            )
        if len(idx) and (idx[0] < 0 or idx[-1] >= t_len):
            raise ContractError(f"target range {idx[0]}..{idx[-1]} outside [0, {t_len})")
        total[idx] += preds
        count[idx] += 1
    covered = count > 0
    total[covered] /= count[covered, None]
    return total, covered


def per_parcel_correlation(
    pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation over covered TRs for each parcel.

    Returns (correlations, defined): undefined (constant-series) parcels hold
    nan and defined=False. Requires at least 2 covered TRs.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if mask is None:
        mask = np.ones(pred.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pred.shape[0],):
        raise ContractError("coverage mask must have one entry per TR")
    p = pred[mask]
    t = truth[mask]
    if p.shape[0] < 2:
        raise ContractError(f"need >= 2 covered TRs, got {p.shape[0]}")
    pc = p - p.mean(axis=0)
    tc = t - t.mean(axis=0)
    ssp = np.einsum("tp,tp->p", pc, pc)
    sst = np.einsum("tp,tp->p", tc, tc)
    cov = np.einsum("tp,tp->p", pc, tc)
    defined = (ssp >= VAR_FLOOR) & (sst >= VAR_FLOOR)
    corr = np.full(pred.shape[1], np.nan)
    ok = defined.copy()
    # Cauchy-Schwarz bounds |rho| by 1; rounding excess snaps to the bound,
    # which also makes self-correlation exactly 1.0.
    with np.errstate(invalid="ignore", divide="ignore"):
        exact = ok & (cov * cov >= ssp * sst)
        corr[exact] = np.sign(cov[exact])
        rest = ok & ~exact
        corr[rest] = cov[rest] / np.sqrt(ssp[rest] * sst[rest])
    return corr, defined


@dataclass
class ScoreReport:
    """Per-parcel correlations for one (session, subject) pair."""

    session_id: str
    subject_id: str
    correlations: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        self.correlations = np.asarray(self.correlations, dtype=np.float64)
        self.defined = np.asarray(self.defined, dtype=bool)
        if self.correlations.shape != self.defined.shape or self.correlations.ndim != 1:
            raise ContractError("correlations and defined flags must be equal-length vectors")

    @property
    def mean_defined(self) -> float | None:
        if not self.defined.any():
            return None
        return float(self.correlations[self.defined].mean())


def challenge_score(reports) -> float:
    """Unweighted mean over all defined (subject, session, parcel) entries.

    Entries are sorted before averaging so the result is exactly invariant
    to report order (floating-point summation is order-sensitive).
    """
    reports = list(reports)
    if not reports:
        raise ContractError("challenge_score needs at least one report")
    values = np.concatenate([r.correlations[r.defined] for r in reports])
    if values.size == 0:
        raise UndefinedScoreError("no defined correlation entries to average")
    return float(np.sort(values).mean())


def emit_report(report: ScoreReport, out_dir, basename: str | None = None) -> tuple[Path, Path]:
    """Write a per-parcel CSV and a JSON summary; values round-trip exactly
    (floats serialized via repr)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = basename or f"{report.session_id}__{report.subject_id}"
    csv_path = out_dir / f"{base}.parcels.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parcel", "correlation", "defined"])
        for i, (c, d) in enumerate(zip(report.correlations, report.defined)):
            writer.writerow([i, repr(float(c)) if d else "", int(d)])
    summary_path = out_dir / f"{base}.summary.json"
    summary = {
        "session_id": report.session_id,
        "subject_id": report.subject_id,
        "parcels": int(report.correlations.size),
        "defined_parcels": int(report.defined.sum()),
        "mean_correlation": report.mean_defined,
    }
    summary_path.write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return csv_path, summary_path


def parse_report_csv(path, session_id: str = "", subject_id: str = "") -> ScoreReport:
    """Inverse of emit_report's CSV half."""
    corr = []
    defined = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            d = bool(int(row["defined"]))
            defined.append(d)
            corr.append(float(row["correlation"]) if d else np.nan)
    return ScoreReport(session_id, subject_id, np.array(corr), np.array(defined))
