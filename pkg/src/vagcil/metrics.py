"""Accuracy bookkeeping, confusion matrices and the neural-collapse metric."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError

PINV_RTOL = 1e-10


def class_means(features: np.ndarray, classes: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """``(K, d)`` class means in first-appearance order, and each row's class index."""
    classes = np.asarray(classes)
    _, first, inverse = np.unique(classes, return_index=True, return_inverse=True)
    # relabel so index order follows first appearance
    rank = np.argsort(np.argsort(first))
    idx = rank[inverse]
    K = len(first)
    means = np.zeros((K, features.shape[1]))
    np.add.at(means, idx, features)
    means /= np.bincount(idx, minlength=K)[:, None]
    return means, idx


def _pinv_sym(m: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix via its eigendecomposition."""
    w, v = np.linalg.eigh(m)
    cutoff = rtol * max(np.abs(w).max(), 0.0)
    inv = np.zeros_like(w)
    keep = np.abs(w) > cutoff
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.T


def nc_metric(features: np.ndarray, classes: Sequence) -> float:
    """``trace(Sigma_W Sigma_B^+) / K`` over pooled features.

    Within-class scatter is normalized by N, between-class scatter by K.
    Larger values mean more within-class spread relative to class separation.
    """
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or len(h) != len(classes):
        raise ContractError("features must be (N, d) with one class per row")
    means, idx = class_means(h, classes)
    K = len(means)
    if K < 2:
        raise ContractError(f"neural collapse needs >= 2 classes, got {K}")
    centered = h - means[idx]
    sigma_w = centered.T @ centered / len(h)
    between = means - h.mean(axis=0)
    sigma_b = between.T @ between / K
    return float(np.trace(sigma_w @ _pinv_sym(sigma_b)) / K)


def confusion_matrix(true: Sequence[str], pred: Sequence[str], labels: Sequence[str]) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class, in ``labels`` order."""
    index = {lab: i for i, lab in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[index[t], index[p]] += 1
    return cm


def accuracy(true: Sequence[str], pred: Sequence[str]) -> float:
    if len(true) == 0:
        raise ContractError("accuracy over an empty evaluation")
    return float(np.mean([t == p for t, p in zip(true, pred)]))


def final_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ContractError("empty evaluation")
    return float(np.trace(cm) / total)


def last_task_bias(cm: np.ndarray, last_task_classes: Sequence[int]) -> float:
    """Share of all predictions that land in the last task's classes."""
    total = cm.sum()
    if total == 0:
        raise ContractError("empty evaluation")
    return float(cm[:, list(last_task_classes)].sum() / total)


def per_task_accuracy(acc_matrix: np.ndarray) -> np.ndarray:
    return np.asarray(acc_matrix)
