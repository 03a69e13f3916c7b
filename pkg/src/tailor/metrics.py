"""Multi-label evaluation metrics.

Accuracy, precision and recall are example-based (averaged over samples);
micro-F1 pools true/false positives over every (sample, label) cell.
Empty-set conventions: accuracy and precision score an empty prediction on an
empty truth as 1, recall scores an empty truth as 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class EvalReport:
    acc: float
    p: float
    r: float
    microf1: float

    def as_dict(self):
        return asdict(self)


def _prepare(pred, truth):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ValueError("metrics need a nonempty (samples, labels) batch")
    return pred, truth


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.int8)


def example_accuracy(pred, truth, subset: bool = False) -> float:
    """Mean Jaccard index per sample, or exact-match ratio when ``subset``."""
    pred, truth = _prepare(pred, truth)
    if subset:
        return float(np.mean(np.all(pred == truth, axis=1)))
    inter = (pred & truth).sum(axis=1)
    union = (pred | truth).sum(axis=1)
    scores = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(scores.mean())


def example_precision_recall(pred, truth) -> tuple[float, float]:
    pred, truth = _prepare(pred, truth)
    inter = (pred & truth).sum(axis=1)
    npred = pred.sum(axis=1)
    ntrue = truth.sum(axis=1)
    prec = np.where(npred == 0, (ntrue == 0).astype(float), inter / np.maximum(npred, 1))
    rec = np.where(ntrue == 0, 1.0, inter / np.maximum(ntrue, 1))
    return float(prec.mean()), float(rec.mean())


def micro_f1(pred, truth) -> float:
    pred, truth = _prepare(pred, truth)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def evaluate(probs, truth, threshold: float = 0.5, subset_accuracy: bool = False) -> EvalReport:
    pred = binarize(probs, threshold)
    p, r = example_precision_recall(pred, truth)
    return EvalReport(example_accuracy(pred, truth, subset_accuracy), p, r, micro_f1(pred, truth))
