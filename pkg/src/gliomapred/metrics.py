"""Confusion matrices and per-class / macro precision, recall, F1, accuracy.

Any 0/0 ratio is defined as 0. Values are kept at full precision; rounding
to two decimals happens only when a table is rendered for display.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tolist(self):
        return self.counts.astype(int).tolist()


@dataclass
class EvalReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    confusion: ConfusionMatrix
    class_names: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            precision=list(d["precision"]),
            recall=list(d["recall"]),
            f1=list(d["f1"]),
            macro_precision=d["macro_precision"],
            macro_recall=d["macro_recall"],
            macro_f1=d["macro_f1"],
            accuracy=d["accuracy"],
            confusion=ConfusionMatrix(np.asarray(d["confusion"], dtype=np.int64)),
            class_names=list(d.get("class_names", [])),
            metadata=dict(d.get("metadata", {})),
        )

    def rows(self, digits: int | None = None):
        """Table rows: one per class, then the macro row (with accuracy)."""
        fmt = (lambda x: round(x, digits)) if digits is not None else (lambda x: x)
        names = self.class_names or [str(i) for i in range(self.confusion.k)]
        out = [
            [name, fmt(p), fmt(r), fmt(f), ""]
            for name, p, r, f in zip(names, self.precision, self.recall, self.f1)
        ]
        out.append(
            ["Macro avg", fmt(self.macro_precision), fmt(self.macro_recall),
             fmt(self.macro_f1), fmt(self.accuracy)]
        )
        return out


def confusion(y_true, y_pred, k: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.size} true vs {y_pred.size} predicted labels")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"{name} label outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def scores(cm: ConfusionMatrix, class_names=None, metadata=None) -> EvalReport:
    counts = cm.counts.astype(np.float64)
    if counts.size == 0 or counts.sum() == 0:
        raise ValueError("cannot score an empty confusion matrix")
    tp = np.diag(counts)
    precision = _safe_div(tp, counts.sum(axis=0))
    recall = _safe_div(tp, counts.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return EvalReport(
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        accuracy=float(tp.sum() / counts.sum()),
        confusion=cm,
        class_names=list(class_names or []),
        metadata=dict(metadata or {}),
    )


def evaluate(y_true, y_pred, k, class_names=None, metadata=None) -> EvalReport:
    return scores(confusion(y_true, y_pred, k), class_names, metadata)


# --------------------------------------------------------------------------
# serialization

REPORT_HEADER = ["class", "precision", "recall", "f1", "accuracy"]


def write_report_csv(report: EvalReport, path, digits: int | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        w.writerows(report.rows(digits))
    return path


def write_report_json(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_report_json(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def render_confusion(report: EvalReport, path, title: str = "") -> Path:
    """Heatmap of the confusion matrix with counts annotated."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = report.confusion.counts
    names = report.class_names or [str(i) for i in range(report.confusion.k)]
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 1.4 * len(names) + 1.5))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    thresh = counts.max() / 2 if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > thresh else "black")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
