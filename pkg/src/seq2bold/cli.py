"""Command-line interface: synth, train, adapt, predict, and eval.

Exit codes: 0 success, 1 usage error (with usage text), 2 data or config
error (diagnostic names the offending file/field). Every successful run
writes a run manifest (resolved config, seed, sha256 of produced artifacts)
into the output directory; reruns with identical inputs produce
byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, fsb
from .autograd import no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import Seq2BoldError
from .evalkit import (
    ScoreReport,
    aggregate_overlaps,
    challenge_score,
    emit_report,
    per_parcel_correlation,
)
from .manifest import load_manifest, load_session
from .model import ModelConfig, adapt_new_subject
from .synth import synth_session
from .training import (
    TrainConfig,
    _session_inputs,
    _summary_embeddings,
    finetune_subject,
    model_from_checkpoint,
    train,
)
from .windows import window_starts

log = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; this toolkit reserves 2 for
    data/config errors, so usage problems raise and exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


# -- config plumbing ----------------------------------------------------------


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise _UsageError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config_file(path, overrides=()) -> tuple[dict, dict]:
    """Read {"model": {...}, "train": {...}} JSON; apply dotted overrides.

    Unknown sections or keys are rejected with a diagnostic naming the file
    and field.
    """
    path = Path(path)
    if not path.exists():
        raise Seq2BoldError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise Seq2BoldError(f"{path}: not valid JSON ({exc})") from exc
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise Seq2BoldError(f"{path}: unknown config section(s) {sorted(unknown)}")
    model_doc = dict(doc.get("model", {}))
    train_doc = dict(doc.get("train", {}))
    for key, value in overrides:
        section, _, field = key.partition(".")
        if section == "model":
            model_doc[field] = value
        elif section == "train":
            train_doc[field] = value
        else:
            raise Seq2BoldError(f"override {key!r}: unknown section {section!r}")
    return model_doc, train_doc


def _fill_model_config(model_doc: dict, manifest) -> ModelConfig:
    """Derive parcels/modality widths from the data when the config omits
    them, then validate everything through ModelConfig."""
    doc = dict(model_doc)
    if "parcels" not in doc or "modalities" not in doc:
        entries = manifest.sessions_in_split("train") or manifest.sessions
        sess = load_session(manifest, entries[0])
        doc.setdefault("parcels", sess.parcels)
        doc.setdefault(
            "modalities", {m: seq.data.shape[1] for m, seq in sess.features.items()}
        )
    return ModelConfig.from_dict(doc)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out_dir: Path, subcommand: str, resolved: dict, artifacts) -> Path:
    doc = {
        "tool": {"name": "seq2bold", "version": __version__},
        "subcommand": subcommand,
        "resolved": resolved,
        "artifacts": {
            str(p.relative_to(out_dir)): _sha256(p) for p in sorted(artifacts)
        },
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _artifact_files(out_dir: Path):
    return [
        p
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "run_manifest.json"
    ]


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    dims = tuple(int(x) for x in args.dims.split(","))
    synth_session(
        out,
        t_len=args.t_len,
        dims=dims,
        parcels=args.parcels,
        subjects=args.subjects,
        noise_sd=args.noise_sd,
        seed=args.seed,
        readout_seed=args.readout_seed,
        session_id=args.session_id,
        split=args.split,
        tr_seconds=args.tr,
        delay=args.delay,
        append=args.append,
    )
    write_run_manifest(
        out,
        "synth",
        {
            "t_len": args.t_len,
            "dims": list(dims),
            "parcels": args.parcels,
            "subjects": args.subjects,
            "noise_sd": args.noise_sd,
            "seed": args.seed,
            "readout_seed": args.readout_seed,
            "split": args.split,
            "tr_seconds": args.tr,
            "delay": args.delay,
        },
        _artifact_files(out),
    )
    return 0


def cmd_train(args) -> int:
    overrides = [_parse_override(s) for s in args.set or []]
    model_doc, train_doc = load_config_file(args.config, overrides)
    manifest = load_manifest(args.data)
    model_cfg = _fill_model_config(model_doc, manifest)
    if args.seed is not None:
        train_doc["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(train_doc)
    out = Path(args.out)
    result = train(manifest, model_cfg, train_cfg, out)
    write_run_manifest(
        out,
        "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        _artifact_files(out),
    )
    best = result.best_val_corr
    print(f"best_val_corr={best if best is not None else 'n/a'}")
    return 0


def cmd_adapt(args) -> int:
    overrides = [_parse_override(s) for s in args.set or []]
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        _, train_doc = load_config_file(args.config, overrides)
    else:
        train_doc = dict(ckpt.config.get("train", {}))
        for key, value in overrides:
            section, _, field = key.partition(".")
            if section != "train":
                raise Seq2BoldError("adapt overrides must target the train section")
            train_doc[field] = value
    train_doc["subjects"] = [args.subject]
    if args.epochs is not None:
        train_doc["epochs"] = args.epochs
    train_cfg = TrainConfig.from_dict(train_doc)

    model, stats, _ = model_from_checkpoint(ckpt)
    rng = np.random.default_rng(
        np.random.SeedSequence((train_cfg.seed, len(model.subjects)))
    )
    trainable = adapt_new_subject(model, args.subject, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adapted = out / "adapted.ckpt"
    tensors = {n: p.data for n, p in model.params().items()}
    tensors.update(stats.tensors())
    save_checkpoint(
        adapted,
        Checkpoint(
            config={"model": model.cfg.to_dict(), "train": train_cfg.to_dict()},
            tensors=tensors,
            meta={**ckpt.meta, "subjects": sorted(model.subjects), "adam_step": 0},
            trainable=sorted(trainable),
        ),
    )
    result = finetune_subject(adapted, load_manifest(args.data), args.subject, train_cfg, out)
    write_run_manifest(
        out,
        "adapt",
        {"subject": args.subject, "train": train_cfg.to_dict()},
        _artifact_files(out),
    )
    best = result.best_val_corr
    print(f"subject={args.subject} best_val_corr={best if best is not None else 'n/a'}")
    return 0


def cmd_predict(args) -> int:
    model, stats, train_cfg = model_from_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w_in = train_cfg.w_in
    w_out = train_cfg.w_out
    delay = train_cfg.delay
    stride = args.stride if args.stride is not None else train_cfg.stride
    entries = manifest.sessions_in_split(args.split) if args.split else manifest.sessions
    if not entries:
        raise Seq2BoldError(f"no sessions in split {args.split!r}")
    pred_entries = []
    for entry in entries:
        sess = load_session(manifest, entry)
        x = _session_inputs(sess, stats, model.cfg)
        starts = window_starts(sess.t_len, w_in, w_out, delay, stride)
        if not starts:
            log.warning("session %s too short for one window; skipped", entry.session_id)
            continue
        summary = _summary_embeddings(sess, model.cfg)
        subjects = [s for s in sorted(sess.fmri) if s in model.subjects]
        for sid in subjects:
            preds = []
            for lo in range(0, len(starts), args.batch_size):
                chunk = starts[lo : lo + args.batch_size]
                feats = np.stack([x[t0 : t0 + w_in] for t0 in chunk])
                with no_grad():
                    h = model.encode(feats)
                    gen = model.generate(h, summary, sid, w_out)
                preds.extend(
                    (range(t0 + delay, t0 + delay + w_out), gen[i])
                    for i, t0 in enumerate(chunk)
                )
            recon, covered = aggregate_overlaps(preds, sess.t_len)
            base = f"{entry.session_id}__{sid}"
            fsb.write_matrix(out / f"{base}.pred.fsb", recon)
            fsb.write_matrix(
                out / f"{base}.coverage.fsb", covered.astype(np.float32).reshape(-1, 1)
            )
            pred_entries.append(
                {
                    "session_id": entry.session_id,
                    "subject_id": sid,
                    "pred": f"{base}.pred.fsb",
                    "coverage": f"{base}.coverage.fsb",
                }
            )
    (out / "pred_manifest.json").write_text(
        json.dumps({"predictions": pred_entries}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    write_run_manifest(
        out,
        "predict",
        {"checkpoint": str(args.checkpoint), "split": args.split, "stride": stride},
        _artifact_files(out),
    )
    return 0


def _truth_matrix(truth_arg: Path, session_id: str, subject_id: str, manifest_cache: dict):
    """Ground truth either from a data manifest or from a directory of FSB
    files matched by <session>__<subject> naming."""
    if truth_arg.is_file():
        if "manifest" not in manifest_cache:
            manifest_cache["manifest"] = load_manifest(truth_arg)
            manifest_cache["sessions"] = {}
        manifest = manifest_cache["manifest"]
        if session_id not in manifest_cache["sessions"]:
            entry = next(
                (s for s in manifest.sessions if s.session_id == session_id), None
            )
            if entry is None:
                raise Seq2BoldError(f"truth manifest lacks session {session_id!r}")
            manifest_cache["sessions"][session_id] = load_session(manifest, entry)
        sess = manifest_cache["sessions"][session_id]
        if subject_id not in sess.fmri:
            raise Seq2BoldError(f"truth manifest lacks subject {subject_id!r} in {session_id!r}")
        return sess.fmri[subject_id].data.astype(np.float64)
    candidates = [
        truth_arg / f"{session_id}__{subject_id}.fsb",
        truth_arg / f"{session_id}_{subject_id}.fsb",
        truth_arg / f"{session_id}__{subject_id}.pred.fsb",
    ]
    for c in candidates:
        if c.exists():
            return fsb.read_matrix(c).astype(np.float64)
    raise Seq2BoldError(
        f"no truth file for ({session_id}, {subject_id}) under {truth_arg}"
    )


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    truth_arg = Path(args.truth)
    out = Path(args.out) if args.out else pred_dir / "scores"
    pm_path = pred_dir / "pred_manifest.json"
    if pm_path.exists():
        entries = json.loads(pm_path.read_text(encoding="utf-8"))["predictions"]
    else:
        entries = []
        for p in sorted(pred_dir.glob("*.pred.fsb")):
            base = p.name[: -len(".pred.fsb")]
            if "__" not in base:
                raise Seq2BoldError(f"cannot parse session/subject from {p.name!r}")
            session_id, subject_id = base.split("__", 1)
            cov = p.with_name(f"{base}.coverage.fsb")
            entries.append(
                {
                    "session_id": session_id,
                    "subject_id": subject_id,
                    "pred": p.name,
                    "coverage": cov.name if cov.exists() else None,
                }
            )
        if not entries:
            for p in sorted(pred_dir.glob("*.fsb")):
                base = p.stem
                if "__" not in base:
                    continue
                session_id, subject_id = base.split("__", 1)
                entries.append(
                    {
                        "session_id": session_id,
                        "subject_id": subject_id,
                        "pred": p.name,
                        "coverage": None,
                    }
                )
    if not entries:
        raise Seq2BoldError(f"no predictions found under {pred_dir}")
    cache: dict = {}
    reports = []
    out.mkdir(parents=True, exist_ok=True)
    for e in entries:
        pred = fsb.read_matrix(pred_dir / e["pred"]).astype(np.float64)
        mask = None
        if e.get("coverage"):
            mask = fsb.read_matrix(pred_dir / e["coverage"]).astype(bool).reshape(-1)
        truth = _truth_matrix(truth_arg, e["session_id"], e["subject_id"], cache)
        t = min(pred.shape[0], truth.shape[0])
        corr, defined = per_parcel_correlation(
            pred[:t], truth[:t], mask[:t] if mask is not None else None
        )
        report = ScoreReport(e["session_id"], e["subject_id"], corr, defined)
        emit_report(report, out)
        reports.append(report)
    grand = challenge_score(reports)
    summary = {
        "grand_mean": grand,
        "reports": [
            {
                "session_id": r.session_id,
                "subject_id": r.subject_id,
                "mean_correlation": r.mean_defined,
                "defined_parcels": int(r.defined.sum()),
            }
            for r in reports
        ],
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_run_manifest(
        out,
        "eval",
        {"pred": str(pred_dir), "truth": str(truth_arg)},
        _artifact_files(out),
    )
    print(f"grand_mean={grand}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="seq2bold",
        description="Train and evaluate sequence-to-sequence fMRI encoding models.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic session")
    p.add_argument("--t-len", type=int, required=True, help="session length in TRs")
    p.add_argument("--dims", default="10,6", help="comma-separated per-modality widths")
    p.add_argument("--parcels", type=int, default=20)
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--readout-seed", type=int, default=None,
                   help="share a readout family across sessions")
    p.add_argument("--session-id", default=None)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--tr", type=float, default=1.5, help="TR in seconds")
    p.add_argument("--delay", type=int, default=5, help="true hemodynamic delay in TRs")
    p.add_argument("--append", action="store_true", help="append to an existing manifest")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--config", required=True, help="JSON config with model/train sections")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="config override (repeatable)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt",
                       help="add a new subject and fine-tune only its head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--config", default=None, help="optional config (defaults to checkpoint's)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("predict",
                       help="free-running prediction over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", ""))
    p.add_argument("--stride", type=int, default=None,
                   help="window stride (default: training stride)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval",
                       help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of prediction FSB files")
    p.add_argument("--truth", required=True,
                   help="data manifest or directory of truth FSB files")
    p.add_argument("-o", "--out", default=None, help="report directory (default: pred/scores)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SEQ2BOLD_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Seq2BoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
