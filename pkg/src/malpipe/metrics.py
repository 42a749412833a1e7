"""Evaluation quantities: accuracy, AUC, FP/FN, confusion matrices, TPR at FPR."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

BENIGN = "benign"


class LengthMismatch(ValueError):
    pass


class OneClassOnly(ValueError):
    """A ranking metric needs both positives and negatives."""


class UnknownLabel(ValueError):
    pass


def accuracy(predicted: Sequence, truth: Sequence) -> float:
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(truth)} labels")
    if not len(truth):
        raise LengthMismatch("accuracy of an empty set is undefined")
    return float(np.mean([p == t for p, t in zip(predicted, truth)]))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks starts+1 .. ends
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc_binary(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if len(s) != len(y):
        raise LengthMismatch("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUC needs both classes")
    ranks = _average_ranks(s)
    # rank sums of halves are exact in binary floating point
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probabilities: np.ndarray, labels: Sequence[int]) -> float:
    """Unweighted mean of one-vs-rest AUCs over the classes present in ``labels``."""
    P = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    present = np.unique(y)
    if len(present) < 2:
        raise OneClassOnly("macro AUC needs at least two classes in the truth")
    return float(np.mean([roc_auc_binary(P[:, c], y == c) for c in present]))


def fp_fn(predicted: Sequence[str], truth: Sequence[str], benign: str = BENIGN) -> tuple[int, int]:
    if len(predicted) != len(truth):
        raise LengthMismatch("predictions and labels differ in length")
    fp = sum(1 for p, t in zip(predicted, truth) if t == benign and p != benign)
    fn = sum(1 for p, t in zip(predicted, truth) if t != benign and p == benign)
    return fp, fn


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # rows = truth, cols = prediction

    def normalized(self) -> np.ndarray:
        support = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, support, out=np.zeros(self.counts.shape), where=support > 0)

    def write_csv(self, path, normalized: bool = False) -> None:
        data = self.normalized() if normalized else self.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.labels])
            for label, row in zip(self.labels, data):
                w.writerow([label, *(f"{v:.6f}" if normalized else int(v) for v in row)])


def confusion(predicted: Sequence[str], truth: Sequence[str], vocabulary: Sequence[str]) -> ConfusionMatrix:
    index = {label: i for i, label in enumerate(vocabulary)}
    counts = np.zeros((len(vocabulary), len(vocabulary)), dtype=np.int64)
    for p, t in zip(predicted, truth):
        if p not in index or t not in index:
            raise UnknownLabel(f"label outside vocabulary: {t if t not in index else p!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(list(vocabulary), counts)


def tpr_at_fpr(scores: Sequence[float], labels: Sequence[int], fpr_target: float) -> tuple[float, float]:
    """Best TPR over thresholds (``score >= t`` is positive) whose FPR stays within target.

    Thresholds are the distinct scores; if none qualifies the threshold is
    +inf and the TPR is 0.
    """
    if not 0.0 < fpr_target < 1.0:
        raise ValueError("fpr_target must be in (0, 1)")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("TPR at FPR needs both classes")
    order = np.argsort(-s, kind="mergesort")
    ss, yy = s[order], y[order]
    last = np.r_[ss[1:] != ss[:-1], True]  # end of each run of equal scores
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(~yy)[last]
    thresholds = ss[last]
    ok = fp <= fpr_target * n_neg
    if not ok.any():
        return 0.0, float("inf")
    # fpr is non-decreasing as the threshold drops; take the lowest that qualifies
    i = int(np.flatnonzero(ok)[-1])
    return float(tp[i] / n_pos), float(thresholds[i])


@dataclass
class StageReport:
    samples: int
    accuracy: float
    auc: Optional[float]
    false_positives: int
    false_negatives: int
    inputs: Optional[int] = None

    def __post_init__(self):
        if self.false_positives + self.false_negatives > self.samples:
            raise ValueError("fp + fn cannot exceed the sample count")


def stage_report(predicted: Sequence[str], truth: Sequence[str], probabilities: np.ndarray,
                 vocabulary: Sequence[str], inputs: Optional[int] = None) -> StageReport:
    """Table-style metrics for one stage; AUC is None when it is undefined."""
    index = {label: i for i, label in enumerate(vocabulary)}
    y = np.array([index[t] for t in truth])
    try:
        if len(vocabulary) == 2:
            auc = roc_auc_binary(probabilities[:, 1], y == 1)
        else:
            auc = macro_auc(probabilities, y)
    except OneClassOnly:
        auc = None
    fp, fn = fp_fn(predicted, truth)
    return StageReport(len(truth), accuracy(predicted, truth), auc, fp, fn, inputs)


REPORT_ROWS = ("Inputs", "Samples", "Accuracy", "AUC", "False positives", "False negatives")


def write_report_csv(reports: dict[str, Optional[StageReport]], path) -> None:
    """Rows are metrics and columns are stages; skipped stages are marked."""
    stages = list(reports)

    def cell(rep: Optional[StageReport], row: str) -> str:
        if rep is None:
            return "skipped"
        value = {
            "Inputs": rep.inputs,
            "Samples": rep.samples,
            "Accuracy": rep.accuracy,
            "AUC": rep.auc,
            "False positives": rep.false_positives,
            "False negatives": rep.false_negatives,
        }[row]
        if value is None:
            return "n/a"
        return f"{value:.6f}" if isinstance(value, float) else str(value)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *stages])
        for row in REPORT_ROWS:
            w.writerow([row, *(cell(reports[s], row) for s in stages)])


def read_report_csv(path) -> dict[str, dict[str, str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    stages = rows[0][1:]
    return {s: {r[0]: r[i + 1] for r in rows[1:]} for i, s in enumerate(stages)}
