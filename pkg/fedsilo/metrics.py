"""
Confusion-matrix statistics, rank AUC and per-partition evaluation.

Undefined metrics are None, never 0.
"""
from dataclasses import dataclass
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
from scipy.stats import rankdata

from fedsilo.errors import ConfigError, EmptyEvaluationError, ShapeError
from fedsilo.schemas import MetricSet

K = TypeVar("K", bound=Hashable)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts."""
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_pair(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if scores.size == 0:
        raise EmptyEvaluationError("cannot evaluate zero rows")
    return scores, labels.astype(bool)


def confusion(probs, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Predict positive iff prob >= threshold and count outcomes."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    probs, truth = _check_pair(probs, labels)
    predicted = probs >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(predicted & truth)),
        fp=int(np.sum(predicted & ~truth)),
        tn=int(np.sum(~predicted & ~truth)),
        fn=int(np.sum(~predicted & truth)),
    )


def prf(cm: ConfusionMatrix) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """Precision, recall and F1; any 0/0 gives None."""
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else None
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else None
    if precision is None or recall is None:
        return precision, recall, None
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def auc(scores, labels) -> Optional[float]:
    """
    Mann-Whitney AUC with average ranks for ties.

    Returns None when either class is absent.
    """
    scores, truth = _check_pair(scores, labels)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u_stat = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def metric_set(probs, labels, threshold: float = 0.5) -> MetricSet:
    """Full MetricSet for scored rows"""
    cm = confusion(probs, labels, threshold)
    precision, recall, f1 = prf(cm)
    support_pos = cm.tp + cm.fn
    support_neg = cm.fp + cm.tn
    return MetricSet(
        precision=precision,
        recall=recall,
        f1=f1,
        auc=auc(probs, labels),
        support_pos=support_pos,
        support_neg=support_neg,
        degenerate=support_pos == 0 or support_neg == 0,
    )


def evaluate_partition(params, ds, indices: Sequence[int], threshold: float = 0.5) -> MetricSet:
    """Metrics of the model on exactly the given rows of `ds`."""
    from fedsilo.nn import predict_proba

    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise EmptyEvaluationError("cannot evaluate an empty partition")
    probs = predict_proba(params, ds.design_matrix[idx])
    return metric_set(probs, ds.labels[idx], threshold)


def evaluate_partitions(
        params,
        ds,
        partitions: Mapping[K, Sequence[int]],
        threshold: float = 0.5) -> Dict[K, MetricSet]:
    """Evaluate many index lists over `ds` with a single forward pass"""
    from fedsilo.nn import predict_proba

    probs = predict_proba(params, ds.design_matrix)
    results: Dict[K, MetricSet] = {}
    for key, indices in partitions.items():
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise EmptyEvaluationError(f"partition {key!r} is empty")
        results[key] = metric_set(probs[idx], ds.labels[idx], threshold)
    return results


def macro_average(values: Mapping[K, Optional[float]]) -> Tuple[Optional[float], List[K]]:
    """Unweighted mean over defined values and the keys left out"""
    excluded = [key for key, value in values.items() if value is None]
    defined = [value for value in values.values() if value is not None]
    if not defined:
        return None, excluded
    return float(np.mean(defined)), excluded
