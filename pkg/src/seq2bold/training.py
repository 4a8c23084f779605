"""Training loop: teacher-forced optimization with scheduled sampling,
epoch shuffling, feature normalization, validation scoring, checkpointing.

Scheduled sampling is two-pass: when the teacher-forcing ratio is below 1,
a no-gradient teacher-forced pass supplies the model's own predictions, a
per-step Bernoulli draw picks the whole previous ground-truth vector or the
whole previous prediction, and one gradient pass trains on the mixed inputs.
Fed-back predictions are treated as constants (no backprop through time
across feedback).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, TrainingAbortError
from .evalkit import ScoreReport, aggregate_overlaps, challenge_score, per_parcel_correlation
from .losses import combined_loss
from .manifest import Manifest, SessionData, load_manifest, load_session, zero_summary
from .model import EncodingModel, ModelConfig
from .optim import Adam
from .summaries import summary_channel
from .windows import TrainingWindow, build_windows, shuffle_epoch, window_starts

log = logging.getLogger(__name__)

SD_FLOOR = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 50
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    lambda_corr: float = 1.0
    gamma_start: float = 1.0
    gamma_end: float = 0.2
    gamma_anneal_epochs: int = 10
    normalize_features: bool = True
    w_in: int = 40
    w_out: int = 35
    delay: int = 5
    stride: int = 1
    val_fraction: float = 0.2
    val_stride: int | None = None
    early_stop_corr: float | None = None
    subjects: list[str] | None = None

    def validate(self, min_epochs: int = 1) -> None:
        if self.epochs < min_epochs:
            raise ConfigError(f"epochs must be >= {min_epochs}, got {self.epochs}")
        for name in ("gamma_start", "gamma_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.gamma_start < self.gamma_end:
            raise ConfigError("gamma_start must be >= gamma_end (annealing decreases)")
        if self.gamma_anneal_epochs < 1:
            raise ConfigError("gamma_anneal_epochs must be >= 1")
        if self.lambda_corr < 0:
            raise ConfigError("lambda_corr must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if self.w_in < 1 or self.w_out < 1 or self.delay < 0 or self.stride < 1:
            raise ConfigError("invalid window geometry in train config")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "seed": self.seed,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "batch_size": self.batch_size,
            "lambda_corr": self.lambda_corr,
            "gamma_start": self.gamma_start,
            "gamma_end": self.gamma_end,
            "gamma_anneal_epochs": self.gamma_anneal_epochs,
            "normalize_features": self.normalize_features,
            "w_in": self.w_in,
            "w_out": self.w_out,
            "delay": self.delay,
            "stride": self.stride,
            "val_fraction": self.val_fraction,
            "val_stride": self.val_stride,
            "early_stop_corr": self.early_stop_corr,
            "subjects": self.subjects,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**doc)


def anneal_gamma(epoch: int, schedule: tuple[float, float, int]) -> float:
    """Linear interpolation from gamma_start at epoch 0 to gamma_end at
    `anneal_epochs`, constant afterwards."""
    g0, g1, n = schedule
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    if n < 1 or epoch >= n:
        return g1  # exact endpoint, no interpolation residue
    frac = epoch / n
    return g0 + (g1 - g0) * frac


def teacher_mix(
    y_true_prev: np.ndarray,
    y_pred_prev: np.ndarray,
    gamma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One Bernoulli(gamma) draw picks the whole ground-truth vector or the
    whole previous prediction; no per-parcel mixing."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must be in [0, 1], got {gamma}")
    return np.array(y_true_prev if rng.random() < gamma else y_pred_prev)


@dataclass
class NormStats:
    """Per-feature z-scoring statistics from the training split."""

    mean: dict[str, np.ndarray]
    sd: dict[str, np.ndarray]

    @classmethod
    def compute(cls, sessions: list[tuple[SessionData, int]], modalities: list[str]) -> "NormStats":
        """`sessions` pairs each training session with the TR count that
        belongs to the training split (temporal tails held out for validation
        are excluded)."""
        mean, sd = {}, {}
        for mod in modalities:
            chunks = [s.features[mod].data[:t_train] for s, t_train in sessions]
            x = np.concatenate(chunks, axis=0).astype(np.float64)
            mean[mod] = x.mean(axis=0)
            sd[mod] = np.maximum(x.std(axis=0), SD_FLOOR)
        return cls(mean, sd)

    def apply(self, session: SessionData, modalities: list[str]) -> np.ndarray:
        cols = [
            (session.features[mod].data.astype(np.float64) - self.mean[mod]) / self.sd[mod]
            for mod in modalities
        ]
        return np.concatenate(cols, axis=1)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for mod in self.mean:
            out[f"norm.mean.{mod}"] = self.mean[mod]
            out[f"norm.sd.{mod}"] = self.sd[mod]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], modalities: list[str]) -> "NormStats":
        return cls(
            mean={m: tensors[f"norm.mean.{m}"] for m in modalities},
            sd={m: tensors[f"norm.sd.{m}"] for m in modalities},
        )

    @classmethod
    def identity(cls, modalities: dict[str, int]) -> "NormStats":
        return cls(
            mean={m: np.zeros(d) for m, d in modalities.items()},
            sd={m: np.ones(d) for m, d in modalities.items()},
        )


@dataclass
class TrainResult:
    best_checkpoint: Path | None
    last_checkpoint: Path
    metrics_path: Path
    best_val_corr: float | None
    metrics: list[dict] = field(default_factory=list)


def _load_sessions(manifest: Manifest) -> dict[str, SessionData]:
    entries = manifest.sessions_in_split("train") + manifest.sessions_in_split("val")
    return {e.session_id: load_session(manifest, e) for e in entries}


def _train_boundaries(
    manifest: Manifest, sessions: dict[str, SessionData], val_fraction: float
) -> dict[str, int]:
    """First held-out TR per training session: a temporal tail split applies
    only when the manifest has no dedicated validation sessions."""
    train_entries = manifest.sessions_in_split("train")
    use_tail = not manifest.sessions_in_split("val") and val_fraction > 0
    out = {}
    for entry in train_entries:
        t = sessions[entry.session_id].t_len
        out[entry.session_id] = int(t * (1 - val_fraction)) if use_tail else t
    return out


def _session_inputs(
    session: SessionData, stats: NormStats, model_cfg: ModelConfig
) -> np.ndarray:
    """Normalized, concatenated encoder input matrix (T, fuse_width)."""
    x = stats.apply(session, model_cfg.modality_order)
    if model_cfg.summary_mode == "gaussian":
        ctx = session.summary or zero_summary(model_cfg.d_sum)
        chan = summary_channel(ctx, session.t_len, session.tr_seconds, model_cfg.summary_sigma_s)
        x = np.concatenate([x, chan], axis=1)
    return x


def _summary_embeddings(session: SessionData, model_cfg: ModelConfig) -> np.ndarray | None:
    if model_cfg.summary_mode != "cross_attention":
        return None
    if session.summary is None:
        return None  # decoder substitutes the zero-sentence placeholder
    return session.summary.embeddings


def _group_batch(batch: list[TrainingWindow]) -> dict[tuple[str, str], list[TrainingWindow]]:
    groups: dict[tuple[str, str], list[TrainingWindow]] = {}
    for w in batch:
        groups.setdefault((w.session_id, w.subject_id), []).append(w)
    return dict(sorted(groups.items()))


class _Runner:
    """Shared machinery between train() and finetune_subject()."""

    def __init__(
        self,
        manifest: Manifest,
        model: EncodingModel,
        stats: NormStats,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        out_dir: Path,
        trainable: set[str] | None = None,
        subjects: list[str] | None = None,
        sessions: dict[str, SessionData] | None = None,
    ):
        cfg.validate(min_epochs=0)
        self.manifest = manifest
        self.model = model
        self.stats = stats
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.trainable = trainable
        self.subjects = subjects if subjects is not None else sorted(model.subjects)

        train_entries = manifest.sessions_in_split("train")
        val_entries = manifest.sessions_in_split("val")
        if not train_entries:
            raise ContractError("no training sessions in manifest")
        self.sessions = sessions if sessions is not None else _load_sessions(manifest)

        parcels = {s.parcels for s in self.sessions.values()}
        if parcels != {model_cfg.parcels}:
            raise ConfigError(f"data parcel counts {parcels} != model config {model_cfg.parcels}")
        for sess in self.sessions.values():
            for mod, width in model_cfg.modalities.items():
                if mod not in sess.features:
                    raise ConfigError(f"session {sess.session_id!r} lacks modality {mod!r}")
                if sess.features[mod].data.shape[1] != width:
                    raise ConfigError(
                        f"session {sess.session_id!r} modality {mod!r} width "
                        f"{sess.features[mod].data.shape[1]} != configured {width}"
                    )

        self.boundaries = _train_boundaries(manifest, self.sessions, cfg.val_fraction)
        use_tail = not val_entries and cfg.val_fraction > 0

        self.train_windows: list[TrainingWindow] = []
        for entry in train_entries:
            sess = self.sessions[entry.session_id]
            wins = build_windows(
                entry,
                self.boundaries[entry.session_id],
                cfg.w_in,
                cfg.w_out,
                cfg.delay,
                cfg.stride,
                subjects=[s for s in self.subjects if s in entry.fmri],
            )
            self.train_windows.extend(wins)
        if not self.train_windows and cfg.epochs > 0:
            raise ContractError("training set is empty: no window fits any session")

        # (session_id, subject, first val TR) triples to score each epoch.
        self.val_specs: list[tuple[str, str, int]] = []
        if val_entries:
            for entry in val_entries:
                for sid in sorted(entry.fmri):
                    if sid in self.subjects:
                        self.val_specs.append((entry.session_id, sid, 0))
        elif use_tail:
            for entry in train_entries:
                for sid in sorted(entry.fmri):
                    if sid in self.subjects:
                        self.val_specs.append(
                            (entry.session_id, sid, self.boundaries[entry.session_id])
                        )

        self.inputs = {
            sid: _session_inputs(s, stats, model_cfg) for sid, s in self.sessions.items()
        }
        root = np.random.SeedSequence(cfg.seed)
        ss_drop, ss_teacher = root.spawn(2)
        self.rng_dropout = np.random.default_rng(ss_drop)
        self.rng_teacher = np.random.default_rng(ss_teacher)
        self.optimizer = Adam(
            model.params(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
            trainable=trainable,
        )
        self.metrics: list[dict] = []

    # -- one training step on one (session, subject) group -------------------

    def _group_loss(self, key: tuple[str, str], wins: list[TrainingWindow], gamma: float):
        session_id, subject_id = key
        sess = self.sessions[session_id]
        x = self.inputs[session_id]
        feats = np.stack([x[w.input_range.start : w.input_range.stop] for w in wins])
        targets = np.stack(
            [
                sess.fmri[subject_id].data[w.target_range.start : w.target_range.stop]
                for w in wins
            ]
        ).astype(np.float64)
        b, w_out, _ = targets.shape
        summary = _summary_embeddings(sess, self.model_cfg)

        h_enc = self.model.encode(feats, self.rng_dropout, training=True)
        if gamma >= 1.0 or w_out == 1:
            y_rest = targets[:, :-1] if w_out > 1 else None
        else:
            draws = self.rng_teacher.random((b, w_out - 1)) < gamma
            with no_grad():
                teacher_in = np.concatenate(
                    [np.broadcast_to(self.model.bos.data, (b, 1, targets.shape[2])), targets[:, :-1]],
                    axis=1,
                )
                prelim = self.model.decode_tf(teacher_in, h_enc, summary, subject_id).data
            y_rest = np.where(draws[:, :, None], targets[:, :-1], prelim[:, :-1])
        y_in = self.model.bos_inputs(y_rest, b)
        out = self.model.decode_tf(
            y_in, h_enc, summary, subject_id, self.rng_dropout, training=True
        )
        return combined_loss(out, targets, self.cfg.lambda_corr)

    def run_epoch(self, epoch: int) -> dict:
        gamma = anneal_gamma(
            epoch, (self.cfg.gamma_start, self.cfg.gamma_end, self.cfg.gamma_anneal_epochs)
        )
        perm = shuffle_epoch(len(self.train_windows), self.cfg.seed, epoch)
        bs = self.cfg.batch_size
        sums = {"loss": 0.0, "mse": 0.0, "corr": 0.0}
        n_windows = 0
        for lo in range(0, len(perm), bs):
            batch = [self.train_windows[i] for i in perm[lo : lo + bs]]
            total = None
            for key, wins in _group_batch(batch).items():
                loss, mse, corr = self._group_loss(key, wins, gamma)
                frac = len(wins) / len(batch)
                piece = loss * frac
                total = piece if total is None else total + piece
                sums["loss"] += float(loss.data) * len(wins)
                sums["mse"] += mse * len(wins)
                sums["corr"] += corr * len(wins)
                n_windows += len(wins)
            if not np.isfinite(total.data):
                raise TrainingAbortError(
                    f"non-finite loss at epoch {epoch}; last good checkpoint: "
                    f"{self.out_dir / 'last.ckpt'}",
                    checkpoint_path=self.out_dir / "last.ckpt",
                )
            total.backward()
            self.optimizer.step()
            self.optimizer.zero_grad()
        return {
            "epoch": epoch,
            "split": "train",
            "loss": sums["loss"] / max(n_windows, 1),
            "mse": sums["mse"] / max(n_windows, 1),
            "corr": sums["corr"] / max(n_windows, 1),
            "gamma": gamma,
            "windows": n_windows,
        }

    # -- validation ----------------------------------------------------------

    def score_split(self, specs=None, stride: int | None = None) -> tuple[float | None, list[ScoreReport]]:
        """Free-running generation over validation windows, overlap
        aggregation, and pooled per-parcel correlation."""
        specs = self.val_specs if specs is None else specs
        if not specs:
            return None, []
        stride = stride if stride is not None else (self.cfg.val_stride or self.cfg.w_out)
        cfg = self.cfg
        reports = []
        for session_id, subject_id, val_start in specs:
            sess = self.sessions[session_id]
            x = self.inputs[session_id]
            t = sess.t_len
            starts = [
                t0
                for t0 in window_starts(t, cfg.w_in, cfg.w_out, cfg.delay, stride)
                if t0 + cfg.delay >= val_start
            ]
            if not starts:
                continue
            summary = _summary_embeddings(sess, self.model_cfg)
            preds = []
            for lo in range(0, len(starts), cfg.batch_size):
                chunk = starts[lo : lo + cfg.batch_size]
                feats = np.stack([x[t0 : t0 + cfg.w_in] for t0 in chunk])
                with no_grad():
                    h = self.model.encode(feats)
                    gen = self.model.generate(h, summary, subject_id, cfg.w_out)
                preds.extend(
                    (range(t0 + cfg.delay, t0 + cfg.delay + cfg.w_out), gen[i])
                    for i, t0 in enumerate(chunk)
                )
            recon, covered = aggregate_overlaps(preds, t)
            mask = covered & (np.arange(t) >= val_start)
            corr, defined = per_parcel_correlation(
                recon, sess.fmri[subject_id].data.astype(np.float64), mask
            )
            reports.append(ScoreReport(session_id, subject_id, corr, defined))
        if not reports:
            return None, []
        return challenge_score(reports), reports

    # -- checkpointing ---------------------------------------------------------

    def make_checkpoint(self, epoch: int, gamma: float, best_val: float | None) -> Checkpoint:
        tensors = {n: p.data for n, p in self.model.params().items()}
        tensors.update(self.stats.tensors())
        tensors.update(self.optimizer.state_tensors())
        return Checkpoint(
            config={"model": self.model_cfg.to_dict(), "train": self.cfg.to_dict()},
            tensors=tensors,
            meta={
                "epoch": epoch,
                "gamma": gamma,
                "best_val_corr": best_val,
                "seed": self.cfg.seed,
                "subjects": sorted(self.model.subjects),
                "adam_step": self.optimizer.step_count,
                "format": "seq2bold-checkpoint",
            },
            trainable=sorted(self.trainable) if self.trainable is not None else None,
        )

    def write_metrics(self) -> Path:
        path = self.out_dir / "metrics.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.metrics:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    # -- main loop ---------------------------------------------------------------

    def fit(self) -> TrainResult:
        best_val = None
        best_path = None
        last_path = self.out_dir / "last.ckpt"
        gamma = self.cfg.gamma_start
        for epoch in range(self.cfg.epochs):
            record = self.run_epoch(epoch)
            gamma = record["gamma"]
            self.metrics.append(record)
            val_corr, _ = self.score_split()
            if val_corr is not None:
                self.metrics.append({"epoch": epoch, "split": "val", "mean_corr": val_corr})
            save_checkpoint(last_path, self.make_checkpoint(epoch, gamma, best_val))
            if val_corr is not None and (best_val is None or val_corr > best_val):
                best_val = val_corr
                best_path = self.out_dir / "best.ckpt"
                save_checkpoint(best_path, self.make_checkpoint(epoch, gamma, best_val))
            log.info(
                "epoch %d: loss=%.5f gamma=%.3f val=%s",
                epoch,
                record["loss"],
                gamma,
                f"{val_corr:.4f}" if val_corr is not None else "n/a",
            )
            if (
                self.cfg.early_stop_corr is not None
                and val_corr is not None
                and val_corr >= self.cfg.early_stop_corr
            ):
                self.metrics.append(
                    {"epoch": epoch, "split": "meta", "early_stop": True, "mean_corr": val_corr}
                )
                break
        if self.cfg.epochs == 0:
            save_checkpoint(last_path, self.make_checkpoint(-1, gamma, best_val))
        metrics_path = self.write_metrics()
        return TrainResult(best_path, last_path, metrics_path, best_val, self.metrics)


def train(
    manifest: Manifest | str | Path,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir,
) -> TrainResult:
    """Train a shared encoder/decoder with per-subject heads on all training
    sessions of the manifest; deterministic given (config, seed, data)."""
    cfg.validate(min_epochs=1)
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    train_entries = manifest.sessions_in_split("train")
    if not train_entries:
        raise ContractError("manifest has no training sessions")

    all_subjects = sorted({s for e in train_entries for s in e.fmri})
    subjects = cfg.subjects if cfg.subjects else all_subjects
    missing = [s for s in subjects if s not in all_subjects]
    if missing:
        raise ConfigError(f"requested subjects absent from training data: {missing}")

    root = np.random.SeedSequence(cfg.seed)
    (ss_init,) = root.spawn(1)
    model = EncodingModel(model_cfg, np.random.default_rng(ss_init), subjects=subjects)

    # Normalization statistics over training-split TRs only.
    sessions = _load_sessions(manifest)
    boundaries = _train_boundaries(manifest, sessions, cfg.val_fraction)
    if cfg.normalize_features:
        stat_sessions = [
            (sessions[e.session_id], boundaries[e.session_id]) for e in train_entries
        ]
        stats = NormStats.compute(stat_sessions, model_cfg.modality_order)
    else:
        stats = NormStats.identity(model_cfg.modalities)

    runner = _Runner(
        manifest, model, stats, model_cfg, cfg, out_dir, subjects=subjects, sessions=sessions
    )
    return runner.fit()


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> tuple[EncodingModel, NormStats, TrainConfig]:
    """Rebuild the model, normalization stats, and train config from a
    checkpoint file or object."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    model = EncodingModel(
        model_cfg, np.random.default_rng(0), subjects=ckpt.meta.get("subjects", [])
    )
    params = {
        k: v
        for k, v in ckpt.tensors.items()
        if not (k.startswith("adam.") or k.startswith("norm."))
    }
    model.set_params(params)
    if any(k.startswith("norm.") for k in ckpt.tensors):
        stats = NormStats.from_tensors(ckpt.tensors, model_cfg.modality_order)
    else:
        stats = NormStats.identity(model_cfg.modalities)
    return model, stats, cfg


def finetune_subject(
    ckpt: Checkpoint | str | Path,
    manifest: Manifest | str | Path,
    subject_id: str,
    cfg: TrainConfig,
    out_dir,
) -> TrainResult:
    """Optimize only one subject's embedding and output head; every shared
    tensor is structurally frozen (never touched by the optimizer).

    The subject must already be registered (model.adapt_new_subject / the
    CLI adapt path). Zero epochs is allowed and leaves parameters unchanged.
    """
    cfg.validate(min_epochs=0)
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    model, stats, _ = model_from_checkpoint(ckpt)
    if subject_id not in model.subjects:
        raise ContractError(
            f"subject {subject_id!r} not registered; run adapt_new_subject first"
        )
    trainable = set(model.subject_param_names(subject_id))
    cfg.subjects = [subject_id]
    runner = _Runner(
        manifest,
        model,
        stats,
        model.cfg,
        cfg,
        out_dir,
        trainable=trainable,
        subjects=[subject_id],
    )
    return runner.fit()
