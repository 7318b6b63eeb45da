"""Evaluation metrics: LogLoss, ROC AUC and Normalized Entropy.

NE is logloss divided by the entropy of the eval set's empirical positive
rate, so the constant base-rate predictor scores exactly 1.0 and anything
below 1.0 beats it. AUC uses midrank tie averaging, making it exact under
any strictly monotone transform of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class Metrics:
    logloss: float
    auc: float
    ne: float
    relative_ne: float | None = None  # percent delta vs a baseline NE

    def as_row(self):
        rel = "" if self.relative_ne is None else self.relative_ne
        return [self.logloss, self.auc, self.ne, rel]


def logloss(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        losses = -(labels * np.log(probs) + (1.0 - labels) * np.log1p(-probs))
    return float(np.mean(losses))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with midrank tie handling."""
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def binary_entropy(q: float) -> float:
    if q <= 0.0 or q >= 1.0:
        raise DegenerateLabelsError(f"base rate {q} admits no entropy normalization")
    return -(q * np.log(q) + (1.0 - q) * np.log(1.0 - q))


def normalized_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    return logloss(probs, labels) / binary_entropy(float(labels.mean()))


def evaluate_predictions(probs: np.ndarray, labels: np.ndarray,
                         baseline_ne: float | None = None) -> Metrics:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DegenerateLabelsError("empty evaluation set")
    ll = logloss(probs, labels)
    a = auc(probs, labels)
    ne = ll / binary_entropy(float(labels.mean()))
    rel = None
    if baseline_ne is not None:
        rel = 100.0 * (ne - baseline_ne) / baseline_ne
    return Metrics(logloss=ll, auc=a, ne=ne, relative_ne=rel)
