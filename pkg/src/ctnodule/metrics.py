"""Confusion-matrix metrics, ROC/AUC from scores, and report emission
(JSON, ROC CSV, standalone SVG plot)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluation, LengthMismatch, SingleClassInput


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    counts: ConfusionCounts
    roc_points: tuple[tuple[float, float, float], ...]  # (fpr, tpr, threshold)

    def to_json(self, extra: dict | None = None) -> str:
        doc = {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "counts": {
                "tp": self.counts.tp,
                "fp": self.counts.fp,
                "tn": self.counts.tn,
                "fn": self.counts.fn,
            },
            "percent": {
                "accuracy": f"{100 * self.accuracy:.2f}",
                "precision": f"{100 * self.precision:.2f}",
                "recall": f"{100 * self.recall:.2f}",
                "f1": f"{100 * self.f1:.2f}",
                "auc": None if self.auc is None else f"{100 * self.auc:.2f}",
            },
            "roc_points": [
                [fpr, tpr, _json_threshold(thr)] for fpr, tpr, thr in self.roc_points
            ],
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)


def _json_threshold(thr: float):
    if math.isinf(thr):
        return "inf" if thr > 0 else "-inf"
    return thr


def confusion_counts(predictions, labels) -> ConfusionCounts:
    """Tally a binary confusion matrix; positive class is 1 (nodule)."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape} vs {y.shape}")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        tn=int(np.sum((p == 0) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
    )


def metrics_from_counts(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1); 0/0 cases are defined as 0."""
    if c.total == 0:
        raise EmptyEvaluation("no samples")
    accuracy = (c.tp + c.tn) / c.total
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    f1 = (
        2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    )
    return accuracy, precision, recall, f1


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float, float]]]:
    """ROC curve over descending unique score thresholds plus +/-inf
    sentinels, with trapezoidal AUC. Matches the pairwise rank statistic."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.shape} vs {y.shape}")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput(f"need both classes, got {n_pos} pos / {n_neg} neg")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(np.sum(y_sorted[i:j] == 1))
        fp += int(np.sum(y_sorted[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos, float(s_sorted[i])))
        i = j
    points.append((1.0, 1.0, float("-inf")))

    auc = 0.0
    for (fpr0, tpr0, _), (fpr1, tpr1, _) in zip(points, points[1:]):
        auc += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0
    return auc, points


def evaluate(predict_fn, features, labels) -> MetricsReport:
    """Run predictions over a feature set and assemble the full report.

    predict_fn maps one feature vector to (label, score). A single-class
    test set yields auc = None and an empty ROC curve.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyEvaluation("empty test set")
    preds = np.empty(len(labels), dtype=np.intp)
    scores = np.empty(len(labels), dtype=np.float64)
    for i, f in enumerate(features):
        preds[i], scores[i] = predict_fn(f)
    counts = confusion_counts(preds, labels)
    accuracy, precision, recall, f1 = metrics_from_counts(counts)
    try:
        auc, points = roc_auc(scores, labels)
    except SingleClassInput:
        auc, points = None, []
    return MetricsReport(accuracy, precision, recall, f1, auc, counts, tuple(points))


def roc_to_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "fpr", "tpr"])
    for fpr, tpr, thr in points:
        writer.writerow([repr(thr), repr(fpr), repr(tpr)])
    return buf.getvalue()


def roc_to_svg(points, size: int = 400, margin: int = 40) -> str:
    """Self-contained SVG line plot of the ROC curve."""
    span = size - 2 * margin

    def sx(fpr):
        return margin + fpr * span

    def sy(tpr):
        return size - margin - tpr * span

    coords = " ".join(f"{sx(fpr):.2f},{sy(tpr):.2f}" for fpr, tpr, _ in points)
    diag = f"{sx(0):.2f},{sy(0):.2f} {sx(1):.2f},{sy(1):.2f}"
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'<rect width="{size}" height="{size}" fill="white"/>\n'
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        f'fill="none" stroke="black"/>\n'
        f'<polyline points="{diag}" fill="none" stroke="#999" stroke-dasharray="4"/>\n'
        f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" '
        f'font-size="12">false positive rate</text>\n'
        f'<text x="12" y="{size / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2:.0f})">true positive rate</text>\n'
        f"</svg>\n"
    )
