"""End-to-end experiments: preprocess a cohort, split, standardize, train,
pick a threshold on validation data and score the held-out set."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .cohort import (DEFAULT_FRACTIONS, SplitAssignment, balance_by_undersampling, cap_per_subject,
                     split_segments_mixed, split_subjects)
from .errors import InsufficientData, InvalidSpec
from .evaluation import EvalReport, choose_threshold, evaluate_both
from .model import ModelConfig, ModelParams, predict
from .signal import (EcgRecording, FilterSpec, PreprocessConfig, SegmentSet, SegmentSpec, Standardizer,
                     apply_standardizer, fit_standardizer, preprocess_recording)
from .train import TrainConfig, TrainReport, train


def derive_seed(seed: int, purpose: str) -> int:
    """Fixed fan-out of the global seed to per-purpose seeds."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class ExperimentConfig:
    preprocess: PreprocessConfig = PreprocessConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    mixed_train_fraction: float = 0.85
    threshold_policy: str = "youden"
    aggregation: str = "mean"
    max_segments_per_subject: int | None = None
    balance: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        pre = d.get("preprocess", {})
        pre = PreprocessConfig(**{**pre, "filter": FilterSpec(**pre.get("filter", {})),
                                  "segment": SegmentSpec(**pre.get("segment", {}))})
        rest = {k: v for k, v in d.items() if k not in ("preprocess", "model", "train")}
        if "fractions" in rest:
            rest["fractions"] = tuple(rest["fractions"])
        return cls(preprocess=pre, model=ModelConfig.from_dict(d.get("model", {})),
                   train=TrainConfig(**d.get("train", {})), **rest)


@dataclass
class RecordingLog:
    subject_id: str
    session_id: int
    n_peaks: int
    n_segments: int
    accepted: bool
    reason: str = ""


def preprocess_cohort(recordings: list[EcgRecording],
                      cfg: PreprocessConfig = PreprocessConfig()) -> tuple[SegmentSet, list[RecordingLog]]:
    """Raw (unstandardized) segments from every recording that passes the gate."""
    parts, logs = [], []
    for rec in recordings:
        out = preprocess_recording(rec, cfg)
        logs.append(RecordingLog(rec.subject_id, rec.session_id, int(out.peaks.size), len(out.segments),
                                 out.accepted, out.reason))
        if out.segments:
            parts.append(SegmentSet.from_segments(out.segments))
    if not parts:
        raise InsufficientData("no recording produced segments")
    return SegmentSet.concat(parts), logs


def standardize(train: SegmentSet, *others: SegmentSet) -> tuple[Standardizer, list[SegmentSet]]:
    """Fit on ``train`` only, then apply the frozen statistics to every set."""
    st = fit_standardizer(train.values)
    out = [SegmentSet(apply_standardizer(st, s.values), s.labels, s.subjects, s.sessions)
           for s in (train, *others)]
    return st, out


@dataclass
class ExperimentResult:
    protocol: str
    params: ModelParams
    train_report: TrainReport
    standardizer: Standardizer
    threshold: float
    segment_report: EvalReport
    subject_report: EvalReport
    sizes: dict[str, int] = field(default_factory=dict)
    split: SplitAssignment | None = None

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "sizes": self.sizes,
            "threshold": self.threshold,
            "best_epoch": self.train_report.best_epoch,
            "segment": {k: getattr(self.segment_report, k) for k in ("auc", "sensitivity", "specificity")},
            "subject": {k: getattr(self.subject_report, k) for k in ("auc", "sensitivity", "specificity")},
        }


PROTOCOLS = ("subject-disjoint", "mixed")


def split_protocol(segments: SegmentSet, cfg: ExperimentConfig, protocol: str = "subject-disjoint"
                   ) -> tuple[SegmentSet, SegmentSet, SegmentSet, SplitAssignment | None]:
    """Cap per subject, then carve train/val/test under the named protocol.

    ``subject-disjoint`` assigns whole subjects to one role.  ``mixed`` lets
    every subject contribute to all three: test is the per-subject held-out
    fraction, and validation is carved from the remaining segments the same way.
    """
    segments = cap_per_subject(segments, cfg.max_segments_per_subject, derive_seed(cfg.seed, "cap"))
    if protocol == "subject-disjoint":
        strata = {sid: int(segments.labels[segments.subjects == sid].max()) for sid in segments.unique_subjects()}
        split = split_subjects(list(strata), cfg.fractions, derive_seed(cfg.seed, "split"), strata)
        train_set, val, test = (segments.select_subjects(split.subjects(r)) for r in ("train", "val", "test"))
        return train_set, val, test, split
    if protocol == "mixed":
        pool, test = split_segments_mixed(segments, cfg.mixed_train_fraction, derive_seed(cfg.seed, "mixed-test"))
        train_set, val = split_segments_mixed(pool, cfg.mixed_train_fraction, derive_seed(cfg.seed, "mixed-val"))
        return train_set, val, test, None
    raise InvalidSpec(f"unknown protocol {protocol!r}")


def fit_model(train_set: SegmentSet, val_set: SegmentSet, cfg: ExperimentConfig,
              log: Callable[[str], None] | None = None) -> tuple[ModelParams, TrainReport, float]:
    """Balance, train and pick the operating threshold; inputs are already standardized."""
    if cfg.balance:
        train_set = balance_by_undersampling(train_set, derive_seed(cfg.seed, "balance"))
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": derive_seed(cfg.seed, "train")})
    params, report = train(cfg.model, train_set, val_set, tcfg, log=log)
    threshold = choose_threshold(predict(params, val_set.values), val_set.labels, cfg.threshold_policy)
    return params, report, threshold


def run_protocol(segments: SegmentSet, cfg: ExperimentConfig = ExperimentConfig(),
                 protocol: str = "subject-disjoint", log: Callable[[str], None] | None = None) -> ExperimentResult:
    train_set, val_set, test_set, split = split_protocol(segments, cfg, protocol)
    st, (train_set, val_set, test_set) = standardize(train_set, val_set, test_set)
    params, report, threshold = fit_model(train_set, val_set, cfg, log)
    scores = predict(params, test_set.values)
    seg, subj = evaluate_both(scores, test_set.labels, test_set.subjects, threshold, cfg.aggregation)
    sizes = {"train": len(train_set), "val": len(val_set), "test": len(test_set),
             "train_subjects": len(train_set.unique_subjects()), "test_subjects": len(test_set.unique_subjects())}
    return ExperimentResult(protocol, params, report, st, threshold, seg, subj, sizes, split)


def run_subject_disjoint(segments: SegmentSet, cfg: ExperimentConfig = ExperimentConfig(),
                         log: Callable[[str], None] | None = None) -> ExperimentResult:
    return run_protocol(segments, cfg, "subject-disjoint", log)


def run_mixed(segments: SegmentSet, cfg: ExperimentConfig = ExperimentConfig(),
              log: Callable[[str], None] | None = None) -> ExperimentResult:
    return run_protocol(segments, cfg, "mixed", log)


def generalization_gap(recordings: list[EcgRecording], cfg: ExperimentConfig = ExperimentConfig(),
                       log: Callable[[str], None] | None = None) -> dict[str, ExperimentResult]:
    """Same cohort, same model and training config, two split protocols."""
    segments, _ = preprocess_cohort(recordings, cfg.preprocess)
    return {
        "subject-disjoint": run_subject_disjoint(segments, cfg, log),
        "mixed": run_mixed(segments, cfg, log),
    }
