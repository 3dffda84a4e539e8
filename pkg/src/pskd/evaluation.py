"""Accuracy and macro-F1 from a confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .models import predict_logits


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray


def confusion_matrix(y_true, y_pred, num_classes):
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ParameterError("y_true and y_pred must be vectors of equal length")
    if y_true.size == 0:
        raise ParameterError("cannot evaluate an empty split")
    for y in (y_true, y_pred):
        if y.min() < 0 or y.max() >= num_classes:
            raise ParameterError(f"class index out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    # 0/0 -> 0 throughout
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = cm.sum()
    return Metrics(
        accuracy=float(np.trace(cm) / total),
        # plain left-to-right mean; np.mean switches to pairwise summation at 8 classes
        macro_f1=sum(f1.tolist()) / len(f1),
        precision=precision, recall=recall, f1=f1,
    )


def predict(logits):
    """Argmax per row; np.argmax already breaks ties toward the lowest index."""
    return np.argmax(np.asarray(logits), axis=1)


def evaluate_logits(logits, labels, num_classes):
    cm = confusion_matrix(labels, predict(logits), num_classes)
    return metrics_from_confusion(cm), cm


def evaluate(model, inputs, labels):
    """Metrics and confusion matrix of ``model`` on one split's inputs."""
    if len(labels) == 0:
        raise ParameterError("cannot evaluate an empty split")
    return evaluate_logits(predict_logits(model, inputs), labels, model.spec.num_classes)
