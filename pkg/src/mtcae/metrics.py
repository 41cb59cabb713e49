"""Confusion-matrix metrics: unweighted accuracy (mean recall) and accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = true class, cols = predicted
    unweighted_accuracy: float
    weighted_accuracy: float
    recall: list  # None for classes without true examples

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "unweighted_accuracy": self.unweighted_accuracy,
            "weighted_accuracy": self.weighted_accuracy,
            "recall": list(self.recall),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(np.asarray(d["confusion"], dtype=np.int64), d["unweighted_accuracy"],
                   d["weighted_accuracy"], list(d["recall"]))

    @classmethod
    def from_confusion(cls, confusion) -> "Metrics":
        cm = np.asarray(confusion, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise MetricError("confusion matrix must be square")
        if (cm < 0).any():
            raise MetricError("confusion counts must be non-negative")
        total = int(cm.sum())
        if total == 0:
            raise MetricError("no examples")
        support = cm.sum(axis=1)
        recall = [float(cm[c, c] / support[c]) if support[c] else None
                  for c in range(cm.shape[0])]
        present = [r for r in recall if r is not None]
        ua = float(sum(present) / len(present))
        wa = float(np.trace(cm) / total)
        return cls(cm, ua, wa, recall)


def confusion_matrix(predictions, labels, n_classes: int = 4) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise MetricError(f"{pred.size} predictions for {true.size} labels")
    if pred.size == 0:
        raise MetricError("no examples")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise MetricError(f"class index outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def compute_metrics(predictions, labels, n_classes: int = 4) -> Metrics:
    return Metrics.from_confusion(confusion_matrix(predictions, labels, n_classes))


def unweighted_accuracy(predictions, labels, n_classes: int = 4) -> float:
    return compute_metrics(predictions, labels, n_classes).unweighted_accuracy
