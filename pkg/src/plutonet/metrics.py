"""Evaluation metrics over thresholded predictions.

Predictions are binarized at a threshold (default 0.5, ``>=``), counted
against the binary ground truth, and summarized as Dice / IoU / precision
/ recall. Reports carry two aggregations: ``mean`` averages per-image
metrics, ``micro`` computes metrics from pooled pixel counts.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import DataError, ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt, threshold=0.5):
    """Binarize pred at threshold and count it against the binary gt."""
    pred = pred.data if isinstance(pred, ag.Tensor) else np.asarray(pred)
    gt = gt.data if isinstance(gt, ag.Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction/ground-truth shapes differ: {pred.shape} vs {gt.shape}")
    pb = pred >= threshold
    gb = gt >= 0.5
    tp = int(np.count_nonzero(pb & gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    return ConfusionCounts(tp, fp, fn, tn)


# Degenerate denominators: 1.0 when prediction and ground truth are both
# empty of positives, 0.0 otherwise.


def dice(c):
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def iou(c):
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def precision(c):
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c):
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def metrics_from_counts(c):
    return {"dice": dice(c), "iou": iou(c), "precision": precision(c), "recall": recall(c)}


METRIC_COLUMNS = ("dice", "iou", "precision", "recall")


@dataclass
class MetricsRow:
    label: str
    n_images: int
    mean: dict
    micro: dict


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    threshold: float = 0.5
    aggregation: str = "mean"  # headline aggregation for the text table

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "aggregation": self.aggregation,
            "rows": [
                {"label": r.label, "n_images": r.n_images, "mean": r.mean, "micro": r.micro}
                for r in self.rows
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        """Human-readable table, one row per dataset, Dice/IoU/Precision/Recall."""
        modes = ("mean", "micro") if self.aggregation == "both" else (self.aggregation,)
        width = max([len(r.label) for r in self.rows] + [12])
        lines = []
        for mode in modes:
            lines.append(f"[{mode} aggregation, threshold={self.threshold}]")
            header = " | ".join(c.capitalize().ljust(9) for c in METRIC_COLUMNS)
            lines.append(f"{'Dataset'.ljust(width)} | {header}")
            lines.append("-" * (width + 3 + len(header)))
            for r in self.rows:
                vals = getattr(r, mode)
                cells = " | ".join(f"{vals[c]:.4f}".ljust(9) for c in METRIC_COLUMNS)
                lines.append(f"{r.label.ljust(width)} | {cells}")
            lines.append("")
        return "\n".join(lines)


def evaluate(model, pairs, threshold=0.5, aggregation="mean", batch_size=8, label="dataset"):
    """Evaluate a model on preprocessed (image, mask) pairs.

    Returns a report row with both per-image mean metrics and pooled
    (micro) metrics.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("cannot evaluate an empty split")
    per_image = []
    pooled = ConfusionCounts()
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        images = np.stack([p[0] for p in chunk])
        probs = model.predict(images)
        for i, (_, gt) in enumerate(chunk):
            counts = confusion(probs[i], gt, threshold)
            per_image.append(metrics_from_counts(counts))
            pooled = pooled + counts
    mean = {k: float(np.mean([m[k] for m in per_image])) for k in METRIC_COLUMNS}
    row = MetricsRow(label=label, n_images=len(pairs), mean=mean, micro=metrics_from_counts(pooled))
    return MetricsReport(rows=[row], threshold=threshold, aggregation=aggregation)
