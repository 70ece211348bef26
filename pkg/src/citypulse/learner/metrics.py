"""Classification metrics, batch-stability series, and report export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InsufficientDataError
from ..features import FEATURE_HEADERS
from .labels import LABELS, N_CLASSES


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class: dict  # CongestionLabel -> ClassMetrics
    confusion: np.ndarray  # rows = truth, columns = prediction
    feature_importances: np.ndarray | None = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_text(self) -> str:
        lines = [f"{'class':<8}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"]
        for label in LABELS:
            m = self.per_class[label]
            lines.append(f"{label.name:<8}{m.precision:>10.4f}{m.recall:>10.4f}{m.f1:>10.4f}{m.support:>10d}")
        lines.append("")
        lines.append(f"accuracy  {self.accuracy:.4f}")
        lines.append(f"macro F1  {self.macro_f1:.4f}")
        lines.append("")
        lines.append("confusion (rows = true, cols = predicted)")
        lines.append(" " * 8 + "".join(f"{l.name:>8}" for l in LABELS))
        for label, row in zip(LABELS, self.confusion):
            lines.append(f"{label.name:<8}" + "".join(f"{int(c):>8d}" for c in row))
        if self.feature_importances is not None:
            lines.append("")
            lines.append("feature importances")
            for name, imp in zip(FEATURE_HEADERS, self.feature_importances):
                lines.append(f"  {name:<14}{imp:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for label in LABELS:
            m = self.per_class[label]
            w.writerow([label.name, repr(m.precision), repr(m.recall), repr(m.f1), m.support])
        w.writerow([])
        w.writerow(["confusion"] + [l.name for l in LABELS])
        for label, row in zip(LABELS, self.confusion):
            w.writerow([label.name] + [int(c) for c in row])
        return buf.getvalue()


def confusion_matrix(truth, pred) -> np.ndarray:
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def report_from_confusion(cm: np.ndarray, feature_importances=None) -> EvalReport:
    """Every metric derives from the confusion matrix; zero denominators give 0."""
    per_class = {}
    for label in LABELS:
        tp = cm[label, label]
        precision = _ratio(tp, cm[:, label].sum())
        recall = _ratio(tp, cm[label, :].sum())
        f1 = _ratio(2 * precision * recall, precision + recall)
        per_class[label] = ClassMetrics(precision, recall, f1, int(cm[label, :].sum()))
    return EvalReport(
        accuracy=_ratio(np.trace(cm), cm.sum()),
        macro_f1=float(np.mean([m.f1 for m in per_class.values()])),
        per_class=per_class,
        confusion=cm,
        feature_importances=feature_importances,
    )


def evaluate(pred, truth, feature_importances=None) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"{len(pred)} predictions for {len(truth)} labels")
    if len(pred) == 0:
        raise InsufficientDataError("nothing to evaluate")
    return report_from_confusion(confusion_matrix(truth, pred), feature_importances)


@dataclass
class BatchSeries:
    reports: list  # EvalReport, or None for a skipped (empty) batch
    combined_confusion: np.ndarray
    skipped: list[int] = field(default_factory=list)  # 1-based batch numbers

    def accuracy(self) -> list[float | None]:
        return [None if r is None else r.accuracy for r in self.reports]

    def macro_f1(self) -> list[float | None]:
        return [None if r is None else r.macro_f1 for r in self.reports]

    def worst_batch(self) -> int:
        """1-based number of the batch with the lowest macro F1."""
        scored = [(r.macro_f1, i + 1) for i, r in enumerate(self.reports) if r is not None]
        return min(scored)[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch", "accuracy", "macro_f1", "samples"])
        for i, r in enumerate(self.reports, start=1):
            if r is None:
                w.writerow([i, "", "", 0])
            else:
                w.writerow([i, repr(r.accuracy), repr(r.macro_f1), r.total])
        return buf.getvalue()


def sequential_batch_eval(batches: Sequence[tuple], model, expected: int | None = 20) -> BatchSeries:
    """Score ``model`` on each (features, truth) batch in order."""
    if expected is not None and len(batches) != expected:
        raise ValueError(f"expected {expected} batches, got {len(batches)}")
    reports, skipped = [], []
    combined = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for number, (X, y) in enumerate(batches, start=1):
        if len(y) == 0:
            reports.append(None)
            skipped.append(number)
            continue
        report = evaluate(model.predict(X), y)
        combined += report.confusion
        reports.append(report)
    return BatchSeries(reports, combined, skipped)
