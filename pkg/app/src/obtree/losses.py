# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
Leaf losses l(theta, y) and their gradients in theta.

Class labels are 1-based. Every entry of LOSSES carries the single-example
and the batched forms of its loss, so inference and the optimizer look the
loss up instead of branching on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Union

import numpy as np
from scipy.special import logsumexp, softmax

from obtree.exceptions import DimensionError, NumericError

Target = Union[int, np.ndarray]


class LossKind(str, Enum):
    LOG = "log"
    SQUARED = "sqr"


def _check_label(theta: np.ndarray, y: int) -> int:
    k = theta.shape[-1]
    if not 1 <= int(y) <= k:
        raise DimensionError(f"label {y} outside 1..{k}")
    return int(y)


def log_loss(theta: np.ndarray, y: int) -> float:
    """Negative log-probability of class y under softmax(theta)."""
    label = _check_label(theta, y)
    value = float(logsumexp(theta) - theta[label - 1])
    # log-sum-exp dominates every entry, so only rounding can push it below 0
    return max(value, 0.0)


def log_loss_grad(theta: np.ndarray, y: int) -> np.ndarray:
    label = _check_label(theta, y)
    grad = softmax(theta)
    grad[label - 1] -= 1.0
    return grad


def sqr_loss(theta: np.ndarray, y: np.ndarray) -> float:
    diff = _sqr_diff(theta, y)
    return float(diff @ diff)


def sqr_loss_grad(theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 2.0 * _sqr_diff(theta, y)


def _sqr_diff(theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    target = np.asarray(y, dtype=float)
    if target.shape != theta.shape:
        raise DimensionError(
            f"target shape {target.shape} does not match theta shape {theta.shape}"
        )
    return theta - target


def _log_leaf_losses(theta: np.ndarray, y: int) -> np.ndarray:
    label = _check_label(theta, y)
    return np.maximum(logsumexp(theta, axis=1) - theta[:, label - 1], 0.0)


def _sqr_leaf_losses(theta: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = _sqr_diff(theta, np.broadcast_to(np.asarray(y, dtype=float), theta.shape))
    return np.einsum("ij,ij->i", diff, diff)


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise DimensionError(f"labels outside 1..{k}")
    return labels


# -------------------- batch forms --------------------
# Arrays are indexed by example b, leaf j or candidate c; theta rows are 0-based.


def _log_loss_matrix(theta: np.ndarray, targets: np.ndarray) -> np.ndarray:
    labels = _check_labels(targets, theta.shape[1])
    return np.maximum(logsumexp(theta, axis=1)[None, :] - theta[:, labels - 1].T, 0.0)


def _sqr_loss_matrix(theta: np.ndarray, targets: np.ndarray) -> np.ndarray:
    diff = theta[None, :, :] - np.asarray(targets, dtype=float)[:, None, :]
    return np.einsum("blq,blq->bl", diff, diff)


def _log_gathered(theta: np.ndarray, leaf_rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    labels = _check_labels(targets, theta.shape[1])
    rows = theta[leaf_rows]
    batch, candidates = leaf_rows.shape
    picked = rows[np.arange(batch)[:, None], np.arange(candidates)[None, :], (labels - 1)[:, None]]
    return np.maximum(logsumexp(rows, axis=2) - picked, 0.0)


def _sqr_gathered(theta: np.ndarray, leaf_rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    diff = theta[leaf_rows] - np.asarray(targets, dtype=float)[:, None, :]
    return np.einsum("bcq,bcq->bc", diff, diff)


def _log_example_grads(theta_rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    labels = _check_labels(targets, theta_rows.shape[1])
    grads = softmax(theta_rows, axis=1)
    grads[np.arange(len(labels)), labels - 1] -= 1.0
    return grads


def _sqr_example_grads(theta_rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return 2.0 * (theta_rows - np.asarray(targets, dtype=float))


def _log_example_losses(theta_rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    labels = _check_labels(targets, theta_rows.shape[1])
    picked = theta_rows[np.arange(len(labels)), labels - 1]
    return np.maximum(logsumexp(theta_rows, axis=1) - picked, 0.0)


def _sqr_example_losses(theta_rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    diff = theta_rows - np.asarray(targets, dtype=float)
    return np.einsum("ij,ij->i", diff, diff)


# -------------------- registry --------------------


@dataclass(frozen=True)
class Loss:
    """Single-example and batched evaluation of one loss."""

    kind: LossKind
    value: Callable[[np.ndarray, Target], float]
    grad: Callable[[np.ndarray, Target], np.ndarray]
    leaf_values: Callable[[np.ndarray, Target], np.ndarray]
    loss_matrix: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gathered: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    example_grads: Callable[[np.ndarray, np.ndarray], np.ndarray]
    example_losses: Callable[[np.ndarray, np.ndarray], np.ndarray]


LOSSES = {
    LossKind.LOG: Loss(
        LossKind.LOG,
        log_loss,
        log_loss_grad,
        _log_leaf_losses,
        _log_loss_matrix,
        _log_gathered,
        _log_example_grads,
        _log_example_losses,
    ),
    LossKind.SQUARED: Loss(
        LossKind.SQUARED,
        sqr_loss,
        sqr_loss_grad,
        _sqr_leaf_losses,
        _sqr_loss_matrix,
        _sqr_gathered,
        _sqr_example_grads,
        _sqr_example_losses,
    ),
}


def get_loss(kind: Union[LossKind, str]) -> Loss:
    return LOSSES[LossKind(kind)]


def _check_finite(theta: np.ndarray) -> None:
    if not np.all(np.isfinite(theta)):
        raise NumericError("leaf parameters contain non-finite values")


def leaf_losses(theta: np.ndarray, y: Target, kind: Union[LossKind, str]) -> np.ndarray:
    """l(theta_j, y) for every row theta_j of the leaf matrix."""
    _check_finite(theta)
    return get_loss(kind).leaf_values(theta, y)


def leaf_loss_matrix(
    theta: np.ndarray, targets: np.ndarray, kind: Union[LossKind, str]
) -> np.ndarray:
    """l(theta_j, y_b) for every example b (rows) and every leaf j (columns)."""
    _check_finite(theta)
    return get_loss(kind).loss_matrix(theta, targets)


def gathered_losses(
    theta: np.ndarray, leaf_rows: np.ndarray, targets: np.ndarray, kind: Union[LossKind, str]
) -> np.ndarray:
    """l(theta[leaf_rows[b, c]], y_b) for a (batch, candidates) array of 0-based leaf rows."""
    _check_finite(theta)
    return get_loss(kind).gathered(theta, leaf_rows, targets)


def example_grads(
    theta_rows: np.ndarray, targets: np.ndarray, kind: Union[LossKind, str]
) -> np.ndarray:
    """Gradient of l(theta_rows[i], targets[i]) in theta_rows[i], for every example i."""
    return get_loss(kind).example_grads(theta_rows, targets)


def example_losses(
    theta_rows: np.ndarray, targets: np.ndarray, kind: Union[LossKind, str]
) -> np.ndarray:
    """l(theta_rows[i], targets[i]) for every example i."""
    return get_loss(kind).example_losses(theta_rows, targets)
