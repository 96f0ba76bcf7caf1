"""Classification metrics from confusion matrices and score matrices.

Confusion matrices are indexed [true, predicted]. Recall and specificity
use their standard one-vs-rest definitions (recall = tp/(tp+fn),
specificity = tn/(tn+fp)); the swapped variants are also reported since
either convention appears in the wild. Multi-class F1, specificity, and
recall are macro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    confusion_matrix: np.ndarray
    top1: float
    f1_macro: float
    specificity_macro: float
    recall_macro: float
    qwk: float
    top2: float | None = None
    per_class: dict = field(default_factory=dict)
    swapped_specificity_macro: float = 0.0
    swapped_recall_macro: float = 0.0

    def as_row(self) -> dict:
        row = {
            "top1": self.top1, "top2": self.top2, "f1_macro": self.f1_macro,
            "specificity_macro": self.specificity_macro, "recall_macro": self.recall_macro,
            "qwk": self.qwk,
        }
        return row


def confusion_from_predictions(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def quadratic_weighted_kappa(cm: np.ndarray) -> float:
    """1 - (weighted observed disagreement) / (weighted chance disagreement).

    Weights grow quadratically with ordinal distance. A matrix with all
    mass on the diagonal scores exactly 1; that includes the degenerate
    case where the chance term vanishes.
    """
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.shape[0]
    total = cm.sum()
    if n == 1:
        return 1.0
    idx = np.arange(n)
    weights = ((idx[:, None] - idx[None, :]) / (n - 1)) ** 2
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / total
    denom = (weights * expected).sum()
    if denom == 0.0:
        return 1.0
    return 1.0 - (weights * cm).sum() / denom


def topk_accuracy(scores: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose label is among the k best scores.

    Ties resolve in favor of the lower class index, so a label tied with
    an earlier class at the k-th position is not counted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds {scores.shape[1]} classes")
    hits = 0
    for row, label in zip(scores, labels):
        own = row[label]
        better = int((row > own).sum())
        tied_earlier = int((row[:label] == own).sum())
        if better + tied_earlier < k:
            hits += 1
    return hits / len(labels)


def compute_metrics(cm: np.ndarray, scores: np.ndarray | None = None,
                    labels=None) -> MetricsReport:
    """Full report from a confusion matrix; top-2 needs the raw scores."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be non-negative")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix has no observations")
    n = cm.shape[0]
    per_class = {}
    f1s, recalls, specs = [], [], []
    for c in range(n):
        tp = cm[c, c]
        fn = cm[c, :].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        recall = tp / (tp + fn) if tp + fn else 0.0
        specificity = tn / (tn + fp) if tn + fp else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
        per_class[c] = {"tp": int(tp), "fp": int(fp), "fn": int(fn), "tn": int(tn),
                        "recall": recall, "specificity": specificity, "f1": f1}
        f1s.append(f1)
        recalls.append(recall)
        specs.append(specificity)
    top2 = topk_accuracy(scores, labels, 2) if scores is not None and n >= 2 else None
    return MetricsReport(
        confusion_matrix=cm.copy(),
        top1=float(np.trace(cm) / total),
        top2=top2,
        f1_macro=float(np.mean(f1s)),
        specificity_macro=float(np.mean(specs)),
        recall_macro=float(np.mean(recalls)),
        qwk=quadratic_weighted_kappa(cm),
        per_class=per_class,
        swapped_specificity_macro=float(np.mean(recalls)),
        swapped_recall_macro=float(np.mean(specs)),
    )
