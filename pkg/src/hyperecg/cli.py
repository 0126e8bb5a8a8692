"""Command-line entry point: ``hyperecg <command> [flags]``.

Every command reads an optional JSON config, applies flag overrides, echoes
the merged config as ``config.json`` in its output directory and writes its
artifacts under fixed names there.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cohort import SynthSpec, synth_cohort
from .errors import FormatError, HyperEcgError, InsufficientData
from .evaluation import evaluate_both
from .model import load_checkpoint, predict, save_params
from .pipeline import (PROTOCOLS, ExperimentConfig, fit_model, generalization_gap, preprocess_cohort,
                       split_protocol, standardize)
from .signal import Standardizer, preprocess_recording
from .storage import load_recordings, read_recording, read_segments, write_cohort, write_segments

SPLIT_FILES = {"train": "train.seg", "val": "val.seg", "test": "test.seg"}

# flag dest -> dotted path into the run config
OVERRIDES = {
    "subjects": "synth.n_subjects",
    "hyper_fraction": "synth.hyper_fraction",
    "duration": "synth.duration_s",
    "sessions": "synth.sessions",
    "delta_bpm": "synth.delta_bpm",
    "delta_qt": "synth.delta_qt_ms",
    "idiosyncrasy": "synth.idiosyncrasy",
    "protocol": "protocol",
    "max_per_subject": "experiment.max_segments_per_subject",
    "epochs": "experiment.train.max_epochs",
    "batch_size": "experiment.train.batch_size",
    "lr": "experiment.train.learning_rate",
    "patience": "experiment.train.patience",
    "optimizer": "experiment.train.optimizer",
    "cam_variant": "experiment.model.cam_variant",
    "threshold_policy": "experiment.threshold_policy",
    "aggregation": "experiment.aggregation",
}


def default_run_config() -> dict:
    return {
        "seed": 0,
        "protocol": "subject-disjoint",
        "synth": SynthSpec().to_dict(),
        "experiment": ExperimentConfig().to_dict(),
    }


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(d: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


def build_run_config(args) -> dict:
    cfg = default_run_config()
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: invalid JSON ({exc})") from None
    for dest, path in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(cfg, path, value)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    # the global seed drives everything downstream
    cfg["synth"]["seed"] = cfg["seed"]
    cfg["experiment"]["seed"] = cfg["seed"]
    if getattr(args, "model", None) == "tiny":
        width = cfg["experiment"]["model"].get("width", 600)
        cfg["experiment"]["model"].update(channels=[4, 8], reductions=[2, 4], width=width)
    return cfg


def _experiment(cfg: dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict(cfg["experiment"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_reports(out: Path, seg, subj) -> None:
    seg.write_json(out / "eval_segment.json")
    subj.write_json(out / "eval_subject.json")
    seg.write_roc_csv(out / "roc.csv")
    subj.write_roc_csv(out / "roc_subject.csv")


def _standardizer_to_json(st: Standardizer) -> dict:
    return {"mean": st.mean.tolist(), "std": st.std.tolist()}


def _standardizer_from_json(d: dict) -> Standardizer:
    return Standardizer(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = build_run_config(args)
    out = _out_dir(args)
    cohort = synth_cohort(SynthSpec(**cfg["synth"]))
    write_cohort(cohort, out)
    _write_json(out / "config.json", cfg)
    n_hyper = sum(t["label"] == 1 for t in cohort.truth[::cohort.spec.sessions])
    print(f"wrote {len(cohort.recordings)} recordings from {cohort.spec.n_subjects} subjects "
          f"({n_hyper} hyperglycemic) to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = build_run_config(args)
    exp = _experiment(cfg)
    out = _out_dir(args)
    recordings = load_recordings(args.manifest)
    segments, logs = preprocess_cohort(recordings, exp.preprocess)
    for log in logs:
        status = "ok" if log.accepted else f"rejected ({log.reason})"
        print(f"{log.subject_id}\ts{log.session_id}\tpeaks={log.n_peaks}\tsegments={log.n_segments}\t{status}")
    rejected = sum(not log.accepted for log in logs)
    print(f"total: {len(segments)} segments from {len(logs) - rejected} recordings, {rejected} rejected")

    train_set, val_set, test_set, split = split_protocol(segments, exp, cfg["protocol"])
    st, parts = standardize(train_set, val_set, test_set)
    for role, part in zip(SPLIT_FILES, parts):
        write_segments(part, out / SPLIT_FILES[role])
    _write_json(out / "standardizer.json", _standardizer_to_json(st))
    split_doc = {"protocol": cfg["protocol"], "sizes": {r: len(p) for r, p in zip(SPLIT_FILES, parts)}}
    if split is not None:
        split_doc["assignment"] = split.to_dict()
    _write_json(out / "split.json", split_doc)
    _write_json(out / "preprocess_log.json", [asdict(log) for log in logs])
    _write_json(out / "config.json", cfg)
    return 0


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    exp = _experiment(cfg)
    data, out = Path(args.data), _out_dir(args)
    train_set = read_segments(data / SPLIT_FILES["train"])
    val_set = read_segments(data / SPLIT_FILES["val"])
    st = _standardizer_from_json(json.loads((data / "standardizer.json").read_text()))
    log = (lambda m: print(m, file=sys.stderr, flush=True)) if not args.quiet else None
    params, report, threshold = fit_model(train_set, val_set, exp, log)
    meta = {"threshold": threshold, "preprocess": asdict(exp.preprocess), "aggregation": exp.aggregation}
    save_params(params, out / "model.ckpt", metadata=meta,
                extra={"standardizer.mean": st.mean, "standardizer.std": st.std})
    _write_json(out / "train_report.json", {**report.to_dict(), "threshold": threshold})
    _write_json(out / "config.json", cfg)
    print(f"best epoch {report.best_epoch} of {report.epochs}, val AUC {report.val_auc[report.best_epoch - 1]:.4f}, "
          f"threshold {threshold:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_run_config(args)
    out = _out_dir(args)
    params, meta, _ = load_checkpoint(args.checkpoint)
    data = read_segments(Path(args.data) / SPLIT_FILES[args.split])
    scores = predict(params, data.values)
    aggregation = args.aggregation or meta.get("aggregation", "mean")
    seg, subj = evaluate_both(scores, data.labels, data.subjects, meta["threshold"], aggregation)
    _write_reports(out, seg, subj)
    _write_json(out / "config.json", cfg)
    for r in (seg, subj):
        print(f"{r.level}: n={r.n} auc={r.auc:.4f} sensitivity={r.sensitivity:.4f} specificity={r.specificity:.4f}")
    return 0


def cmd_infer(args) -> int:
    params, meta, extra = load_checkpoint(args.checkpoint)
    exp = ExperimentConfig.from_dict({"preprocess": meta["preprocess"]})
    rec = read_recording(args.recording, subject_id=Path(args.recording).stem)
    out = preprocess_recording(rec, exp.preprocess)
    if not out.segments:
        raise InsufficientData(f"{args.recording}: no segments ({out.reason or 'no complete windows'})")
    st = Standardizer(extra["standardizer.mean"], extra["standardizer.std"])
    values = st.apply(np.stack([s.values for s in out.segments]))
    probs = predict(params, values)
    for i, (s, p) in enumerate(zip(out.segments, probs)):
        print(f"segment\t{i}\t{s.r_index}\t{float(p)!r}")
    score = float(np.mean(probs))
    threshold = float(meta["threshold"])
    flag = "rejected-by-quality-gate" if not out.accepted else "ok"
    print(f"subject\t{rec.subject_id}\t{score!r}\t{int(score >= threshold)}\t{flag}")
    return 0


def cmd_gap(args) -> int:
    cfg = build_run_config(args)
    exp = _experiment(cfg)
    out = _out_dir(args)
    log = (lambda m: print(m, file=sys.stderr, flush=True)) if not args.quiet else None
    results = generalization_gap(load_recordings(args.manifest), exp, log)
    summary = {}
    for protocol in PROTOCOLS:
        r = results[protocol]
        sub = out / protocol
        sub.mkdir(exist_ok=True)
        _write_reports(sub, r.segment_report, r.subject_report)
        _write_json(sub / "train_report.json", {**r.train_report.to_dict(), "threshold": r.threshold})
        summary[protocol] = r.summary()
    summary["gap_auc"] = summary["mixed"]["segment"]["auc"] - summary["subject-disjoint"]["segment"]["auc"]
    _write_json(out / "gap.json", summary)
    _write_json(out / "config.json", cfg)
    for protocol in PROTOCOLS:
        print(f"{protocol}: segment auc={summary[protocol]['segment']['auc']:.4f}")
    print(f"gap (mixed - subject-disjoint): {summary['gap_auc']:+.4f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperecg", description="ECG-based hyperglycemia screening experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int, help="global seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    def experiment_flags(p):
        p.add_argument("--protocol", choices=PROTOCOLS)
        p.add_argument("--max-per-subject", type=int, dest="max_per_subject")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        p.add_argument("--patience", type=int)
        p.add_argument("--optimizer", choices=("adam", "sgd"))
        p.add_argument("--model", choices=("full", "tiny"), help="tiny: two narrow blocks, for smoke runs")
        p.add_argument("--cam-variant", dest="cam_variant", choices=("paper-eq2", "standard-cbam"))
        p.add_argument("--threshold-policy", dest="threshold_policy", choices=("youden", "fixed"))
        p.add_argument("--aggregation", choices=("mean", "vote"))
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic cohort directory")
    common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--hyper-fraction", type=float, dest="hyper_fraction")
    p.add_argument("--duration", type=float, help="seconds per recording")
    p.add_argument("--sessions", type=int)
    p.add_argument("--delta-bpm", type=float, dest="delta_bpm")
    p.add_argument("--delta-qt", type=float, dest="delta_qt", help="T-wave delay for hyperglycemic subjects (ms)")
    p.add_argument("--idiosyncrasy", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="segment, split and standardize a cohort")
    common(p)
    p.add_argument("manifest")
    experiment_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a preprocessed segment cache")
    common(p)
    p.add_argument("data", help="directory written by preprocess")
    experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split with a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("data", help="directory written by preprocess")
    p.add_argument("--split", choices=tuple(SPLIT_FILES), default="test")
    p.add_argument("--aggregation", choices=("mean", "vote"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-segment probabilities for one recording")
    p.add_argument("checkpoint")
    p.add_argument("recording")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gap", help="subject-disjoint vs mixed split on the same cohort")
    common(p)
    p.add_argument("manifest")
    experiment_flags(p)
    p.set_defaults(func=cmd_gap)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HyperEcgError, OSError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"hyperecg {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
