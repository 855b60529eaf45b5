"""Confusion matrix and the OA / AA / Kappa accuracy measures."""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """``T x T`` counts; rows are true classes, columns predictions (0-based)."""

    def __init__(self, classes: int, counts: Optional[np.ndarray] = None):
        if classes < 1:
            raise ValueError("need at least one class")
        self.classes = classes
        if counts is None:
            counts = np.zeros((classes, classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (classes, classes) or (counts < 0).any():
            raise ValueError("counts must be a non-negative T x T matrix")
        self.counts = counts

    def accumulate(self, true, pred) -> "ConfusionMatrix":
        true = np.atleast_1d(np.asarray(true, dtype=np.int64))
        pred = np.atleast_1d(np.asarray(pred, dtype=np.int64))
        if true.shape != pred.shape:
            raise ValueError("true and predicted labels differ in length")
        for arr in (true, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= self.classes):
                raise ValueError(f"label outside 0..{self.classes - 1}")
        np.add.at(self.counts, (true, pred), 1)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require_samples(self) -> None:
        if self.total == 0:
            raise ValueError("confusion matrix is empty")

    def per_class_accuracy(self) -> np.ndarray:
        """Recall per true class; NaN where the class has no samples."""
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / rows, np.nan)

    def oa(self) -> float:
        self._require_samples()
        return float(np.trace(self.counts) / self.total)

    def aa(self) -> float:
        self._require_samples()
        acc = self.per_class_accuracy()
        empty = np.isnan(acc)
        if empty.any():
            log.warning("classes %s have no samples; left out of AA", list(np.flatnonzero(empty)))
        return float(np.nanmean(acc))

    def kappa(self) -> float:
        self._require_samples()
        n = float(self.total)
        p_o = np.trace(self.counts) / n
        p_e = float(self.counts.sum(axis=1) @ self.counts.sum(axis=0)) / (n * n)
        if p_e == 1.0:
            # a single class on both sides: agreement is complete
            return 1.0
        return float((p_o - p_e) / (1.0 - p_e))

    def report(self, class_names: Optional[Sequence[str]] = None) -> str:
        """Per-class accuracies then OA/AA/Kappa, as percentages."""
        lines = []
        for t, acc in enumerate(self.per_class_accuracy()):
            name = class_names[t] if class_names else f"class {t + 1}"
            value = "   n/a" if np.isnan(acc) else f"{100 * acc:6.2f}"
            lines.append(f"{name}: {value}")
        lines.append(f"OA: {100 * self.oa():.2f}")
        lines.append(f"AA: {100 * self.aa():.2f}")
        lines.append(f"Kappa: {100 * self.kappa():.2f}")
        lines.append(f"Total: {self.total}")
        return "\n".join(lines) + "\n"


def oa(cm: ConfusionMatrix) -> float:
    return cm.oa()


def aa(cm: ConfusionMatrix) -> float:
    return cm.aa()


def kappa(cm: ConfusionMatrix) -> float:
    return cm.kappa()


def confusion(true, pred, classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(classes).accumulate(true, pred)
