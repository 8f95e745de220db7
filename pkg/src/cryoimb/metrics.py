"""Confusion-matrix metrics for imbalanced multiclass evaluation.

Per-class values use the one-vs-rest reduction of the full matrix; macro
values are unweighted means over classes.  Any zero denominator yields 0.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise ShapeError(f"confusion matrix must be n x n with n >= 2, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def one_vs_rest(self, c):
        """``(TP, FN, FP, TN)`` for class ``c`` treated as positive."""
        if not 0 <= c < self.n_classes:
            raise IndexError(f"class {c} out of range for {self.n_classes} classes")
        m = self.counts
        tp = int(m[c, c])
        fn = int(m[c].sum()) - tp
        fp = int(m[:, c].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fn, fp, tn

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def confusion_matrix(preds, truths, n_classes):
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ShapeError(f"{preds.size} predictions for {truths.size} labels")
    for name, labels in (("prediction", preds), ("label", truths)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"{name} out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    return num / den if den else 0.0


def precision_recall(cm, c):
    tp, fn, fp, _ = cm.one_vs_rest(c)
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def f_beta(precision, recall, beta=1.0):
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    den = b2 * precision + recall
    return (1 + b2) * precision * recall / den if den else 0.0


def f1_scores(cm):
    return np.array([f_beta(*precision_recall(cm, c)) for c in range(cm.n_classes)])


def macro_f1(cm):
    return float(f1_scores(cm).mean())


def g_mean(cm, c, form="product"):
    """G-mean of class ``c`` against the rest.

    ``form="product"`` is sqrt(sensitivity * specificity).  ``"paper_sum"``
    puts a sum under the root instead; it can exceed 1 and is kept only for
    side-by-side comparison.
    """
    tp, fn, fp, tn = cm.one_vs_rest(c)
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    if form == "product":
        return float(np.sqrt(sens * spec))
    if form == "paper_sum":
        return float(np.sqrt(sens + spec))
    raise ValueError(f"unknown g-mean form {form!r}")


def macro_g_mean(cm, form="product"):
    return float(np.mean([g_mean(cm, c, form) for c in range(cm.n_classes)]))


@dataclass
class ClassReport:
    precision: list
    recall: list
    f1: list
    g_mean: list
    macro_f1: float
    macro_g_mean: float

    def rows(self):
        for c in range(len(self.f1)):
            yield c, self.precision[c], self.recall[c], self.f1[c], self.g_mean[c]


def class_report(cm, beta=1.0, form="product"):
    pr = [precision_recall(cm, c) for c in range(cm.n_classes)]
    f = [f_beta(p, r, beta) for p, r in pr]
    g = [g_mean(cm, c, form) for c in range(cm.n_classes)]
    return ClassReport(
        precision=[p for p, _ in pr],
        recall=[r for _, r in pr],
        f1=f,
        g_mean=g,
        macro_f1=float(np.mean(f)),
        macro_g_mean=float(np.mean(g)),
    )


def write_class_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "g_mean"])
        for row in report.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        w.writerow(["macro", "", "", repr(report.macro_f1), repr(report.macro_g_mean)])
