"""Classification metrics: ACC, BACC, Cohen's kappa, macro-F1, macro one-vs-rest AUROC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricsReport:
    acc: float
    bacc: float
    kappa: float
    f1: float
    auroc: float
    confusion: np.ndarray
    support: np.ndarray
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "ACC": self.acc,
            "BACC": self.bacc,
            "KAPPA": self.kappa,
            "F1": self.f1,
            "AUROC": self.auroc,
            "confusion": self.confusion.tolist(),
            "support": self.support.tolist(),
            "notes": list(self.notes),
        }

    def to_text(self) -> str:
        lines = [f"{k}={v:.6f}" for k, v in self.as_dict().items() if isinstance(v, float)]
        lines.append("confusion=" + ";".join(",".join(str(int(v)) for v in row) for row in self.confusion))
        lines.append("support=" + ",".join(str(int(v)) for v in self.support))
        lines.extend(f"note={n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _active(cm: np.ndarray) -> np.ndarray:
    # classes absent from both labels and predictions drop out of macro averages
    return (cm.sum(axis=1) + cm.sum(axis=0)) > 0


def accuracy(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


def balanced_accuracy(cm: np.ndarray) -> float:
    support = cm.sum(axis=1)
    mask = support > 0
    return float(np.mean(np.diag(cm)[mask] / support[mask]))


def cohen_kappa(cm: np.ndarray) -> float:
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float((cm.sum(axis=0) * cm.sum(axis=1)).sum()) / (n * n)
    if pe == 1.0:
        return 1.0 if po == 1.0 else 0.0
    return float((po - pe) / (1.0 - pe))


def macro_f1(cm: np.ndarray) -> float:
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    mask = _active(cm)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1[mask].mean())


def binary_auroc(labels, scores) -> float:
    """Mann-Whitney estimate with mid-ranks for ties."""
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auroc(y_true, scores: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    vals = [binary_auroc(y_true == c, scores[:, c]) for c in range(scores.shape[1])]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_predictions(y_true, scores: np.ndarray) -> MetricsReport:
    """Metrics from integer labels and per-class scores ``[N, C]`` (argmax = prediction)."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1]
    cm = confusion_matrix(y_true, scores.argmax(axis=1), k)
    notes = [f"class {c} absent from labels and predictions; excluded from macro averages"
             for c in np.flatnonzero(~_active(cm))]
    return MetricsReport(
        acc=accuracy(cm),
        bacc=balanced_accuracy(cm),
        kappa=cohen_kappa(cm),
        f1=macro_f1(cm),
        auroc=macro_auroc(y_true, scores),
        confusion=cm,
        support=cm.sum(axis=1),
        notes=notes,
    )
