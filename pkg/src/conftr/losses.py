"""Training objectives for conformal training and its baselines."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

STABILIZER = 1e-8


def loss_matrix(matrix, num_classes: int | None = None) -> np.ndarray:
    """Validate a dense ``[K, K]`` loss matrix (identity when ``None``)."""
    if matrix is None:
        if num_classes is None:
            raise ContractError("need num_classes for the default identity loss matrix")
        return np.eye(num_classes)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"loss matrix must be square, got {matrix.shape}")
    if num_classes is not None and matrix.shape[0] != num_classes:
        raise ShapeError(f"loss matrix is {matrix.shape}, model has {num_classes} classes")
    if np.any(matrix < 0):
        raise ContractError("loss matrix entries must be non-negative")
    return matrix


def size_weights(weights, num_classes: int | None = None) -> np.ndarray:
    if weights is None:
        if num_classes is None:
            raise ContractError("need num_classes for the default size weights")
        return np.ones(num_classes)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or (num_classes is not None and weights.shape[0] != num_classes):
        raise ShapeError(f"size weights must be a length-K vector, got {weights.shape}")
    if np.any(weights <= 0):
        raise ContractError("size weights must be positive")
    return weights


def size_loss(membership, kappa: int, labels, weights=None) -> Tensor:
    """Mean of ``w[y] * max(0, sum_k C_k - kappa)`` over the batch."""
    membership = ad.as_tensor(membership)
    labels = np.asarray(labels, dtype=np.int64)
    per_example = ad.hinge(membership.sum(axis=1), float(kappa))
    if weights is not None:
        per_example = per_example * size_weights(weights, membership.shape[1])[labels]
    return per_example.mean()


def classification_loss(membership, labels, matrix=None) -> Tensor:
    """Penalize a missing true class and, per ``matrix``, present wrong classes.

    Per example: ``sum_k L[y, k] * ((1 - C_k) [k == y] + C_k [k != y])``.
    """
    membership = ad.as_tensor(membership)
    b, k = membership.shape
    labels = np.asarray(labels, dtype=np.int64)
    matrix = loss_matrix(matrix, k)
    one_hot = np.eye(k)[labels]
    rows = matrix[labels]
    per_entry = (1.0 - membership) * (one_hot * rows) + membership * ((1.0 - one_hot) * rows)
    return per_entry.sum(axis=1).mean()


def conftr_objective(class_loss, size_term, size_weight: float) -> Tensor:
    """``log(class_loss + size_weight * size_term + 1e-8)``."""
    if size_weight < 0:
        raise ContractError("size weight must be non-negative")
    return ad.log(ad.as_tensor(class_loss) + ad.as_tensor(size_term) * size_weight + STABILIZER)


def coverage_loss_batch(membership, labels, alpha: float) -> Tensor:
    """Squared gap between mean true-class membership and ``1 - alpha``."""
    membership = ad.as_tensor(membership)
    if membership.shape[0] == 0:
        raise ContractError("coverage loss of an empty batch")
    gap = ad.pick(membership, labels).mean() - (1.0 - alpha)
    return ad.square(gap)


def cross_entropy(logits, labels) -> Tensor:
    return -ad.pick(ad.log_softmax(logits), labels).mean()


def weight_penalty(tensors, coefficient: float) -> Tensor | float:
    if coefficient == 0:
        return 0.0
    total = ad.Tensor(0.0)
    for t in tensors:
        total = total + ad.square(t).sum()
    return total * coefficient
