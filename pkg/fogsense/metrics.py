"""
Recall metrics

FoG is the positive class. Ratios with a zero denominator are None, never 0.
"""

from typing import Optional, Sequence

import numpy as np

from .errors import SchemaError
from .models import ConfusionCounts, RecallScores


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    pred = np.asarray(predictions).astype(bool)
    true = np.asarray(labels).astype(bool)
    if pred.shape != true.shape:
        raise SchemaError(f"{pred.size} predictions for {true.size} labels")
    return ConfusionCounts(
        tp=int(np.sum(pred & true)),
        tn=int(np.sum(~pred & ~true)),
        fp=int(np.sum(pred & ~true)),
        fn=int(np.sum(~pred & true)),
    )


def sensitivity(counts: ConfusionCounts) -> Optional[float]:
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else None


def specificity(counts: ConfusionCounts) -> Optional[float]:
    denom = counts.tn + counts.fp
    return counts.tn / denom if denom else None


def average_recall(counts: ConfusionCounts) -> Optional[float]:
    sens, spec = sensitivity(counts), specificity(counts)
    if sens is None or spec is None:
        return None
    return (sens + spec) / 2


def recall_scores(counts: ConfusionCounts) -> RecallScores:
    return RecallScores(
        counts=counts,
        sensitivity=sensitivity(counts),
        specificity=specificity(counts),
        average_recall=average_recall(counts),
    )


def balanced_recall(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Average recall with undefined treated as 0, for ranking candidates."""
    value = average_recall(confusion(predictions, labels))
    return 0.0 if value is None else value
