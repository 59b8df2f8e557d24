"""Binary classification metrics on P(fake) scores."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def accuracy(labels, scores, threshold: float = 0.5) -> float:
    labels = np.asarray(labels, dtype=int)
    pred = (np.asarray(scores, dtype=float) >= threshold).astype(int)
    return float(np.mean(pred == labels))


def macro_f1(labels, scores, threshold: float = 0.5) -> float:
    """Unweighted mean of the per-class F1 scores; an empty class scores 0."""
    labels = np.asarray(labels, dtype=int)
    pred = (np.asarray(scores, dtype=float) >= threshold).astype(int)
    f1s = []
    for cls in (0, 1):
        tp = np.sum((pred == cls) & (labels == cls))
        fp = np.sum((pred == cls) & (labels != cls))
        fn = np.sum((pred != cls) & (labels == cls))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


def roc_auc(labels, scores) -> float | None:
    """Mann-Whitney estimate of P(score_fake > score_real), ties counted half.

    Returns ``None`` when only one class is present.
    """
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def summarize(labels, scores) -> dict:
    return {
        "accuracy": accuracy(labels, scores),
        "macro_f1": macro_f1(labels, scores),
        "auc": roc_auc(labels, scores),
        "n_samples": int(len(labels)),
    }
