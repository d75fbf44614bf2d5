"""
Clustering evaluation: accuracy under the best one-to-one label matching,
normalised mutual information and purity.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from .base import DataError


@dataclass
class MetricsReport:
    acc: float
    nmi: float
    pur: float
    contingency: list = field(default_factory=list)
    permutation: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "acc": round(self.acc, 6),
            "nmi": round(self.nmi, 6),
            "pur": round(self.pur, 6),
            "contingency": self.contingency,
            "permutation": {str(k): v for k, v in self.permutation.items()},
        }


def _check(pred, true):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if len(pred) != len(true):
        raise DataError(f"{len(pred)} predicted labels for {len(true)} true labels")
    if len(pred) == 0:
        raise DataError("no labels to evaluate")
    return pred, true


def accuracy(pred, true):
    """
    Returns the best agreement rate over one-to-one maps from predicted
    clusters to true classes, and that map. The contingency table is padded
    square so unequal cluster and class counts still match one-to-one.
    """
    pred, true = _check(pred, true)
    counts = contingency_matrix(true, pred).T
    size = max(counts.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: counts.shape[0], : counts.shape[1]] = counts

    rows, cols = linear_sum_assignment(-padded)
    pred_ids, true_ids = np.unique(pred), np.unique(true)
    permutation = {
        int(pred_ids[r]): int(true_ids[c])
        for r, c in zip(rows, cols)
        if r < len(pred_ids) and c < len(true_ids)
    }
    return padded[rows, cols].sum() / len(pred), permutation


def nmi(pred, true):
    pred, true = _check(pred, true)
    return float(normalized_mutual_info_score(true, pred, average_method="arithmetic"))


def purity(pred, true):
    pred, true = _check(pred, true)
    counts = contingency_matrix(true, pred)
    return counts.max(axis=0).sum() / len(pred)


def evaluate(pred, true) -> MetricsReport:
    pred, true = _check(pred, true)
    acc, permutation = accuracy(pred, true)
    return MetricsReport(
        acc=float(acc),
        nmi=nmi(pred, true),
        pur=float(purity(pred, true)),
        contingency=contingency_matrix(true, pred).T.tolist(),
        permutation=permutation,
    )
