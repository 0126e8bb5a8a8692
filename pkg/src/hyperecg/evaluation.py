"""ROC/AUC, sensitivity/specificity and subject-level aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, SingleClass


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise InvalidSpec(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.isin(y, (0, 1)).all():
        raise InvalidSpec("labels must be 0 or 1")
    return s, y


def roc_auc(scores, labels) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(fpr, tpr, threshold)`` and trapezoidal AUC.

    One point per distinct score (equal scores move together, which is what
    gives tied pairs half credit), preceded by ``(0, 0, inf)``.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.flatnonzero(np.diff(s)) if s.size > 1 else np.zeros(0, dtype=np.int64)
    ends = np.append(last_of_group, s.size - 1)
    tp = np.concatenate([[0], np.cumsum(y)[ends]])
    fp = np.concatenate([[0], np.cumsum(1 - y)[ends]])
    thresholds = np.concatenate([[np.inf], s[ends]])
    # integer numerator keeps the trapezoid sum exact up to one final division
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2.0 * n_pos * n_neg)
    roc = [(float(f) / n_neg, float(t) / n_pos, float(th)) for f, t, th in zip(fp, tp, thresholds)]
    return roc, auc


def confusion(scores, labels, threshold: float) -> dict[str, int]:
    s, y = _check(scores, labels)
    pred = s >= threshold
    return {
        "tp": int(np.sum(pred & (y == 1))),
        "fp": int(np.sum(pred & (y == 0))),
        "tn": int(np.sum(~pred & (y == 0))),
        "fn": int(np.sum(~pred & (y == 1))),
    }


def sens_spec(scores, labels, threshold: float) -> tuple[float, float, dict[str, int]]:
    """Predict positive iff ``score >= threshold``; NaN where a class is absent."""
    c = confusion(scores, labels, threshold)
    pos, neg = c["tp"] + c["fn"], c["tn"] + c["fp"]
    sens = c["tp"] / pos if pos else math.nan
    spec = c["tn"] / neg if neg else math.nan
    return sens, spec, c


def choose_threshold(val_scores, val_labels, policy: str = "youden") -> float:
    """Operating threshold from validation data.

    ``youden`` maximises TPR - FPR over the ROC grid (highest threshold on
    ties) and returns the midpoint to the next lower distinct score, which
    keeps the validation operating point while not sitting on a sample.
    """
    if policy == "fixed":
        return 0.5
    if policy != "youden":
        raise InvalidSpec(f"unknown threshold policy {policy!r}")
    roc, _ = roc_auc(val_scores, val_labels)
    j = np.array([tpr - fpr for fpr, tpr, _ in roc[1:]])
    best = int(np.argmax(j)) + 1
    th = roc[best][2]
    if best + 1 < len(roc):
        th = 0.5 * (th + roc[best + 1][2])
    return float(th)


def subject_aggregate(scores, subjects, labels=None, method: str = "mean",
                      threshold: float = 0.5):
    """Collapse segment scores to one score per subject.

    ``mean`` averages probabilities; ``vote`` returns the fraction of segments
    at or above ``threshold`` (so 0.5 is a majority).  Returns
    ``(subject_ids, subject_scores, subject_labels)``; labels are the
    majority segment label (ties count as positive) or None.
    """
    s = np.asarray(scores, dtype=np.float64)
    subj = np.asarray(subjects, dtype=object)
    ids = sorted(set(subj.tolist()))
    out_scores, out_labels = [], []
    y = None if labels is None else np.asarray(labels, dtype=np.int64)
    for sid in ids:
        mask = subj == sid
        if method == "mean":
            out_scores.append(float(s[mask].mean()))
        elif method == "vote":
            out_scores.append(float(np.mean(s[mask] >= threshold)))
        else:
            raise InvalidSpec(f"unknown aggregation {method!r}")
        if y is not None:
            out_labels.append(int(y[mask].mean() >= 0.5))
    return ids, np.asarray(out_scores), (None if y is None else np.asarray(out_labels, dtype=np.int64))


@dataclass
class EvalReport:
    level: str
    auc: float
    sensitivity: float
    specificity: float
    operating_threshold: float
    confusion: dict[str, int]
    roc: list[tuple[float, float, float]] = field(repr=False)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "n": self.n,
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "operating_threshold": self.operating_threshold,
            "confusion": self.confusion,
            "roc": [[f, t, None if math.isinf(th) else th] for f, t, th in self.roc],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for fpr, tpr, th in self.roc:
                w.writerow([repr(fpr), repr(tpr), "inf" if math.isinf(th) else repr(th)])


def evaluate(scores, labels, threshold: float, level: str = "segment") -> EvalReport:
    roc, auc = roc_auc(scores, labels)
    sens, spec, conf = sens_spec(scores, labels, threshold)
    return EvalReport(level, auc, sens, spec, float(threshold), conf, roc, n=len(np.asarray(labels)))


def evaluate_both(scores, labels, subjects, threshold: float, aggregation: str = "mean") -> tuple[EvalReport, EvalReport]:
    """Segment-level and subject-level reports at the same operating threshold."""
    seg = evaluate(scores, labels, threshold, "segment")
    _, subj_scores, subj_labels = subject_aggregate(scores, subjects, labels, aggregation, threshold)
    subj_threshold = threshold if aggregation == "mean" else 0.5
    return seg, evaluate(subj_scores, subj_labels, subj_threshold, "subject")
