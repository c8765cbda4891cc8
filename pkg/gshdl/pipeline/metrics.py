"""Per-class pixel accuracy (PA)."""

from typing import Iterable, Optional, Tuple

import numpy as np

from ..errors import DataError


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                     void_label: Optional[int] = -1) -> np.ndarray:
    """``(C, C)`` counts indexed ``[truth, prediction]``; void pixels are skipped.

    Raises:
        DataError: Shapes differ or a prediction is outside ``[0, C)``
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    valid = (truth >= 0) & (truth < num_classes)
    if void_label is not None:
        valid &= truth != void_label
    if np.any((pred[valid] < 0) | (pred[valid] >= num_classes)):
        raise DataError(f"predicted labels must lie in [0, {num_classes})")
    codes = num_classes * truth[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(codes, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def accuracy_from_confusion(confusion: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class accuracies in percent (NaN for classes absent from truth) and their mean."""
    totals = confusion.sum(axis=1)
    correct = np.diag(confusion)
    per_class = np.full(len(totals), np.nan)
    present = totals > 0
    per_class[present] = 100.0 * correct[present] / totals[present]
    pa = float(np.mean(per_class[present])) if present.any() else float("nan")
    return per_class, pa


def per_class_pixel_accuracy(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                             void_label: Optional[int] = -1) -> Tuple[np.ndarray, float]:
    """Per-class accuracy and PA (percent) of one labeling.

    Classes absent from ``truth`` get NaN and are left out of the mean.
    """
    return accuracy_from_confusion(confusion_matrix(pred, truth, num_classes, void_label))


def dataset_pixel_accuracy(preds: Iterable[np.ndarray], truths: Iterable[np.ndarray],
                           num_classes: int) -> Tuple[np.ndarray, float, np.ndarray]:
    """Per-class accuracy and PA pooled over all pixels of a set of images."""
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, truth in zip(preds, truths):
        confusion += confusion_matrix(pred, truth, num_classes)
    per_class, pa = accuracy_from_confusion(confusion)
    return per_class, pa, confusion


def majority_label(truths: Iterable[np.ndarray], num_classes: int) -> int:
    """Most frequent non-void label (smallest index on ties)."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for truth in truths:
        valid = truth[(truth >= 0) & (truth < num_classes)]
        counts += np.bincount(valid, minlength=num_classes)
    return int(np.argmax(counts))
