"""Sentiment regression metrics: Acc@7, Acc@5, Acc@2, F1@2, MAE and Pearson correlation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

METRIC_NAMES = ("acc7", "acc5", "acc2", "f1_2", "mae", "corr")


def round_half_away(x) -> np.ndarray:
    """Round to the nearest integer, ties away from zero (np.round rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def class_accuracy(preds, labels, bound: int) -> float:
    """Accuracy after clamping to [-bound, bound] and rounding onto the integer grid."""
    p = round_half_away(np.clip(preds, -bound, bound))
    y = round_half_away(np.clip(labels, -bound, bound))
    return float(np.mean(p == y))


def _nonzero(preds, labels):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    keep = labels != 0
    return preds[keep] > 0, labels[keep] > 0


def binary_accuracy(preds, labels) -> float:
    """Sign accuracy; samples labelled exactly 0 belong to neither class and are dropped."""
    p, y = _nonzero(preds, labels)
    return float(np.mean(p == y)) if y.size else math.nan


def binary_f1(preds, labels) -> float:
    """F1 of the positive class on the non-zero-labelled samples."""
    p, y = _nonzero(preds, labels)
    tp = np.sum(p & y)
    fp = np.sum(p & ~y)
    fn = np.sum(~p & y)
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def pearson(preds, labels) -> float:
    """Pearson correlation; NaN when either side has zero variance."""
    x = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        return math.nan
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


@dataclass
class MetricsReport:
    acc7: float
    acc5: float
    acc2: float
    f1_2: float
    mae: float
    corr: float  # NaN marks an undefined correlation

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_json_lines(self) -> str:
        return "".join(
            json.dumps({"metric": k, "value": None if math.isnan(v) else v}) + "\n"
            for k, v in self.as_dict().items()
        )

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, value = line.split("=", 1)
                values[key.strip()] = float(value)
        return cls(**values)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def compute_metrics(preds, labels) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError(f"need equal, non-empty prediction/label arrays, got {preds.shape} and {labels.shape}")
    return MetricsReport(
        acc7=class_accuracy(preds, labels, 3),
        acc5=class_accuracy(preds, labels, 2),
        acc2=binary_accuracy(preds, labels),
        f1_2=binary_f1(preds, labels),
        mae=float(np.mean(np.abs(preds - labels))),
        corr=pearson(preds, labels),
    )
