# app/services/metrics.py
import logging
from typing import Optional, Sequence

import numpy as np

from app.errors import ConfigurationError, ShapeError
from app.schemas import MetricsBundle

logger = logging.getLogger(__name__)


def evaluate(
    predictions: np.ndarray,
    labels: np.ndarray,
    test_mask: np.ndarray,
    minority_classes: Sequence[int],
    num_classes: Optional[int] = None,
) -> MetricsBundle:
    """
    Точность и macro-recall по тестовым узлам, общие и по миноритарным классам.

    Миноритарная точность: доля верных ответов среди тестовых узлов с
    миноритарной меткой. Класс без тестовых узлов пропускается с предупреждением.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    test_mask = np.asarray(test_mask, dtype=bool)
    if predictions.shape != labels.shape or labels.shape != test_mask.shape:
        raise ShapeError("evaluate: predictions, labels и test_mask должны иметь одну длину")
    if not test_mask.any():
        raise ConfigurationError("evaluate: пустая тестовая маска")

    y = labels[test_mask]
    p = predictions[test_mask]
    if num_classes is None:
        num_classes = int(max(y.max(), p.max(), max(minority_classes, default=0))) + 1

    recalls: list[Optional[float]] = []
    for c in range(num_classes):
        support = y == c
        if not support.any():
            recalls.append(None)
            continue
        recalls.append(float(np.mean(p[support] == c)))

    present = [r for r in recalls if r is not None]
    minority_recalls = []
    for c in minority_classes:
        if recalls[c] is None:
            logger.warning("Миноритарный класс %d не имеет тестовых узлов и пропущен", c)
            continue
        minority_recalls.append(recalls[c])

    in_minority = np.isin(y, list(minority_classes))
    correct = p == y
    return MetricsBundle(
        overall_accuracy=float(np.mean(correct)),
        minority_accuracy=float(np.mean(correct[in_minority])) if in_minority.any() else 0.0,
        overall_recall=float(np.mean(present)),
        minority_recall=float(np.mean(minority_recalls)) if minority_recalls else 0.0,
        per_class_recall=recalls,
    )
