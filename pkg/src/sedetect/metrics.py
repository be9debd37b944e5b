"""Binary classification metrics: confusion matrix, P/R/F1, ROC and AUC.

Class 0 is "fake" (F) and class 1 is "real" (R).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import LabelError, ShapeError, UndefinedCurveError

CLASS_LABELS = ("F", "R")
CLASS_NAMES = ("fake", "real")


@dataclass(frozen=True)
class ConfusionMatrix2:
    counts: np.ndarray  # counts[true][predicted]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool


def _binary_labels(values, what):
    arr = np.asarray(values)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise LabelError(f"{what} must be 0 or 1, got {sorted(set(arr.tolist()) - {0, 1})[:5]}")
    return arr.astype(np.intp)


def confusion(predicted, true) -> ConfusionMatrix2:
    p = _binary_labels(predicted, "predicted labels")
    t = _binary_labels(true, "true labels")
    if p.shape != t.shape:
        raise ShapeError(f"{p.size} predictions for {t.size} labels")
    counts = np.zeros((2, 2), np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix2(counts)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def precision_recall_f1(cm: ConfusionMatrix2, class_index: int) -> PRF:
    """Scores for ``class_index`` treated as the positive class.

    An empty denominator gives 0 and sets ``degenerate``.
    """
    c = cm.counts
    tp = c[class_index, class_index]
    predicted = c[:, class_index].sum()
    actual = c[class_index, :].sum()
    degenerate = predicted == 0 or actual == 0
    precision = tp / predicted if predicted else 0.0
    recall = tp / actual if actual else 0.0
    return PRF(float(precision), float(recall), f1_score(precision, recall), bool(degenerate))


def accuracy(cm: ConfusionMatrix2) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / cm.total)


# --------------------------------------------------------------------------
# ROC / AUC
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    positive: int

    def area(self) -> float:
        """Trapezoidal area under the curve."""
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))

    def to_csv(self) -> str:
        return "".join(f"{x:.6f},{y:.6f}\n" for x, y in zip(self.fpr, self.tpr))


def _split_classes(scores, labels, positive):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    pos = y == positive
    if pos.all() or not pos.any():
        raise UndefinedCurveError("ROC needs at least one positive and one negative sample")
    return s, pos


def roc_points(scores, labels, positive: int = 1) -> RocCurve:
    """One point per distinct score threshold, from (0,0) to (1,1)."""
    s, pos = _split_classes(scores, labels, positive)
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(pos)[last_of_group]
    fps = np.cumsum(~pos)[last_of_group]
    fpr = np.r_[0.0, fps / fps[-1]]
    tpr = np.r_[0.0, tps / tps[-1]]
    return RocCurve(fpr, tpr, positive)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v = values[order]
    starts = np.r_[0, np.nonzero(np.diff(v))[0] + 1]
    ends = np.r_[starts[1:], v.size]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks starts+1..ends
    ranks = np.empty(v.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels, positive: int = 1) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s, pos = _split_classes(scores, labels, positive)
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    rank_sum = _average_ranks(s)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: ConfusionMatrix2
    per_class: tuple[PRF, PRF]
    accuracy: float
    auc: tuple[float, float]
    samples: int

    def values(self) -> dict[str, float | int]:
        """Flat metric dictionary; the key-value document is rendered from it."""
        out: dict[str, float | int] = {"samples": self.samples, "accuracy": self.accuracy}
        for i, name in enumerate(CLASS_NAMES):
            prf = self.per_class[i]
            out[f"precision_{name}"] = prf.precision
            out[f"recall_{name}"] = prf.recall
            out[f"f1_{name}"] = prf.f1
            out[f"auc_{name}"] = self.auc[i]
        for t, tn in enumerate(CLASS_NAMES):
            for p, pn in enumerate(CLASS_NAMES):
                out[f"cm_{tn}_{pn}"] = int(self.confusion.counts[t, p])
        return out

    def to_kv(self) -> str:
        lines = []
        for key, value in self.values().items():
            lines.append(f"{key}={value}" if isinstance(value, int) else f"{key}={value!r}")
        return "\n".join(lines) + "\n"

    def render(self, model_name: str = "CNN+SE") -> str:
        c = self.confusion.counts
        return "\n".join([
            f"Classification report ({self.samples} samples)",
            render_table({model_name: self}),
            "",
            "Confusion matrix (rows: true, columns: predicted)",
            f"{'':8}{'F':>8}{'R':>8}",
            f"{'F':8}{c[0, 0]:>8}{c[0, 1]:>8}",
            f"{'R':8}{c[1, 0]:>8}{c[1, 1]:>8}",
            "",
            f"AUC-ROC  F: {self.auc[0]:.4f}  R: {self.auc[1]:.4f}",
        ]) + "\n"


def render_table(reports: dict[str, EvalReport]) -> str:
    """Side-by-side rows in the Precision/Recall/F1 (F, R) + Accuracy layout."""
    width = max(8, *(len(n) for n in reports))
    head1 = f"{'Model':<{width}} | {'Precision':^11} | {'Recall':^11} | {'F1-score':^11} | Accuracy"
    head2 = f"{'':<{width}} | {'F':>5} {'R':>5} | {'F':>5} {'R':>5} | {'F':>5} {'R':>5} |"
    lines = [head1, head2, "-" * len(head1)]
    for name, r in reports.items():
        f, rl = r.per_class
        lines.append(
            f"{name:<{width}} | {f.precision:5.2f} {rl.precision:5.2f} | {f.recall:5.2f} {rl.recall:5.2f}"
            f" | {f.f1:5.2f} {rl.f1:5.2f} | {100 * r.accuracy:.2f}%"
        )
    return "\n".join(lines)


def parse_kv(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = float(value)
    return out


def classification_report(probabilities: np.ndarray, labels) -> EvalReport:
    """Evaluate softmax rows against true labels.

    The predicted class is the row argmax; exact ties go to class 0. Each
    class's AUC uses that class's own probability column.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    y = _binary_labels(labels, "true labels")
    if probs.ndim != 2 or probs.shape != (y.size, 2):
        raise ShapeError(f"expected ({y.size}, 2) probabilities, got {probs.shape}")
    predicted = probs.argmax(axis=1)
    cm = confusion(predicted, y)
    return EvalReport(
        confusion=cm,
        per_class=(precision_recall_f1(cm, 0), precision_recall_f1(cm, 1)),
        accuracy=accuracy(cm),
        auc=(auc(probs[:, 0], y, 0), auc(probs[:, 1], y, 1)),
        samples=int(y.size),
    )
