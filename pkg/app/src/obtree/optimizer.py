# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
Projected stochastic subgradient descent on the surrogate objective.

Each example contributes (g_hat - h_hat) x^T to the W-subgradient, which is
nonzero only on the rows where the loss-augmented maximizer and the
subtracted maximizer disagree (at most d rows for SGD, 2d for SSGD), and
the loss gradient at the loss-augmented leaf to the theta-subgradient.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from obtree.config import Algorithm, OptimizerConfig
from obtree.data_io import Dataset
from obtree.exceptions import ConfigError, DataError, DimensionError, NumericError
from obtree.inference import (
    BatchSolution,
    BoundMode,
    accuracy,
    assignment_disagreements,
    empirical_loss,
    search_batch,
    surrogate_loss,
)
from obtree.losses import example_grads
from obtree.tree_core import TreeModel, route

logger = logging.getLogger(__name__)


def project_row(w: np.ndarray, nu: float) -> np.ndarray:
    """Euclidean projection onto the ball ||w||^2 <= nu."""
    if not nu > 0:
        raise ConfigError(f"nu must be positive, got {nu}")
    norm_sq = float(w @ w)
    if norm_sq <= nu:
        return w
    return w * math.sqrt(nu / norm_sq)


def _project_rows(W: np.ndarray, rows: np.ndarray, nu: float) -> None:
    if rows.size == 0:
        return
    norm_sq = np.einsum("ij,ij->i", W[rows], W[rows])
    over = norm_sq > nu
    if np.any(over):
        W[rows[over]] *= np.sqrt(nu / norm_sq[over])[:, None]


@dataclass
class MomentumState:
    W: np.ndarray
    theta: np.ndarray

    @classmethod
    def zeros_like(cls, model: TreeModel) -> "MomentumState":
        return cls(np.zeros_like(model.W), np.zeros_like(model.theta))


class Batch(NamedTuple):
    X: np.ndarray
    targets: np.ndarray
    assignments: Optional[np.ndarray] = None


@dataclass
class BatchGradient:
    """Averaged batch subgradient, stored by row (0-based)."""

    W_rows: np.ndarray
    W: np.ndarray
    theta_rows: np.ndarray
    theta: np.ndarray

    def dense_W(self, shape: tuple) -> np.ndarray:
        full = np.zeros(shape)
        full[self.W_rows] = self.W
        return full


def _difference_entries(
    model: TreeModel, batch: Batch, solution: BatchSolution
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(example, node, coefficient of x) for every nonzero entry of g_hat - h."""
    coef = 2.0 * solution.flip_bits
    if batch.assignments is None:
        return solution.flip_examples, solution.flip_nodes, coef
    forced_examples, forced_nodes, forced_bits = assignment_disagreements(
        model, batch.X, batch.assignments
    )
    # both disagree with sign(Wx) at a shared (example, node), so they cancel
    stride = model.topology.internal_count + 1
    g_keys = solution.flip_examples * stride + solution.flip_nodes
    h_keys = forced_examples * stride + forced_nodes
    shared = np.intersect1d(g_keys, h_keys)
    keep_g = ~np.isin(g_keys, shared)
    keep_h = ~np.isin(h_keys, shared)
    return (
        np.concatenate([solution.flip_examples[keep_g], forced_examples[keep_h]]),
        np.concatenate([solution.flip_nodes[keep_g], forced_nodes[keep_h]]),
        np.concatenate([coef[keep_g], -2.0 * forced_bits[keep_h]]),
    )


def surrogate_gradient(
    model: TreeModel, batch: Batch, config: OptimizerConfig
) -> BatchGradient:
    """
    Batch-averaged subgradient of the surrogate.

    With batch.assignments (SSGD) the subtracted term is the score
    constrained to each example's assigned leaf.
    """
    if len(batch.X) == 0:
        raise DataError("empty batch")
    solution = search_batch(model, batch.X, batch.targets, config.inference)
    examples, nodes, coef = _difference_entries(model, batch, solution)
    scale = 1.0 / len(batch.X)

    W_rows, W_slot = np.unique(nodes - 1, return_inverse=True)
    grad_W = np.zeros((W_rows.size, model.features))
    np.add.at(grad_W, W_slot, coef[:, None] * batch.X[examples])

    leaf_rows = solution.leaves - 1
    theta_rows, theta_slot = np.unique(leaf_rows, return_inverse=True)
    grad_theta = np.zeros((theta_rows.size, model.theta.shape[1]))
    np.add.at(
        grad_theta,
        theta_slot,
        example_grads(model.theta[leaf_rows], batch.targets, model.task),
    )
    return BatchGradient(W_rows, grad_W * scale, theta_rows, grad_theta * scale)


def sgd_step(
    model: TreeModel, batch: Batch, config: OptimizerConfig, state: MomentumState
) -> TreeModel:
    """
    One projected heavy-ball step, applied to `model` in place.

    Rows that move are projected back onto ||w_i||^2 <= nu. A non-finite
    gradient rejects the step and leaves the model untouched.
    """
    grad = surrogate_gradient(model, batch, config)
    if not (np.all(np.isfinite(grad.W)) and np.all(np.isfinite(grad.theta))):
        raise NumericError(
            f"non-finite gradient (W rows {grad.W_rows.tolist()}, "
            f"theta rows {grad.theta_rows.tolist()}); step rejected"
        )
    eta, mu = config.eta, config.momentum
    if mu == 0.0:
        model.W[grad.W_rows] -= eta * grad.W
        model.theta[grad.theta_rows] -= eta * grad.theta
        moved = grad.W_rows
    else:
        state.W *= mu
        state.W[grad.W_rows] -= eta * grad.W
        state.theta *= mu
        state.theta[grad.theta_rows] -= eta * grad.theta
        model.W += state.W
        model.theta += state.theta
        moved = np.flatnonzero(np.any(state.W != 0.0, axis=1))
    _project_rows(model.W, moved, config.nu)
    return model


def run_epoch(
    model: TreeModel,
    dataset: Dataset,
    config: OptimizerConfig,
    state: MomentumState,
    rng: np.random.Generator,
    max_steps: int,
    assignments: Optional[np.ndarray] = None,
) -> int:
    """One reshuffled pass of minibatch steps, stopping after max_steps; returns steps taken."""
    X, targets = dataset.X, dataset.targets
    order = rng.permutation(len(dataset))
    steps = 0
    for start in range(0, len(order), config.batch_size):
        if steps >= max_steps:
            break
        idx = order[start : start + config.batch_size]
        sgd_step(
            model,
            Batch(X[idx], targets[idx], None if assignments is None else assignments[idx]),
            config,
            state,
        )
        steps += 1
    return steps


# -------------------- training loops --------------------


@dataclass
class EpochMetrics:
    epoch: int
    empirical_loss: float
    surrogate_loss: float
    train_accuracy: Optional[float]
    val_accuracy: Optional[float]
    active_leaves: int
    wall_ms: float
    steps: int
    phase: Optional[int] = None
    fast_surrogate: Optional[float] = None

    def as_record(self) -> dict:
        return {"record": "epoch", **asdict(self)}


@dataclass
class TrainResult:
    model: TreeModel
    trace: List[EpochMetrics] = field(default_factory=list)
    best_epoch: Optional[int] = None


def active_leaves(model: TreeModel, dataset: Dataset) -> int:
    """Number of distinct leaves reached by the dataset."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    return int(np.unique(route(model.W, dataset.X, model.topology)).size)


def _check_compatible(dataset: Dataset, model: TreeModel) -> None:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if dataset.width != model.features:
        raise DimensionError(
            f"dataset has {dataset.width} columns, model expects {model.features}"
            + ("" if dataset.augmented else " (dataset is not augmented)")
        )
    if dataset.task != model.task or dataset.num_classes != model.classes:
        raise DimensionError(
            f"dataset ({dataset.task.value}, {dataset.num_classes} outputs) does not "
            f"match model ({model.task.value}, {model.classes} outputs)"
        )


class _BestTracker:
    """Keeps the model with the best validation score seen so far."""

    def __init__(self, validation: Optional[Dataset]) -> None:
        self.validation = validation
        self.score = -math.inf
        self.model: Optional[TreeModel] = None
        self.epoch: Optional[int] = None

    def offer(self, model: TreeModel, epoch: int, val_accuracy: Optional[float]) -> None:
        if self.validation is None:
            return
        if val_accuracy is not None:
            score = val_accuracy
        else:
            score = -empirical_loss(model, self.validation)
        if score > self.score:
            self.score, self.model, self.epoch = score, model.copy(), epoch


def _measure(
    model: TreeModel,
    dataset: Dataset,
    config: OptimizerConfig,
    epoch: int,
    steps: int,
    wall_ms: float,
    validation: Optional[Dataset],
    assignments: Optional[np.ndarray] = None,
    phase: Optional[int] = None,
) -> EpochMetrics:
    if assignments is None:
        bound = surrogate_loss(model, dataset, BoundMode(config.inference.value))
        fast_bound = None
    else:
        bound = surrogate_loss(
            model, dataset, BoundMode.SSGD, assignments, config.inference
        )
        fast_bound = surrogate_loss(model, dataset, BoundMode.FAST)
    metrics = EpochMetrics(
        epoch=epoch,
        empirical_loss=empirical_loss(model, dataset),
        surrogate_loss=bound,
        train_accuracy=accuracy(model, dataset),
        val_accuracy=None if validation is None else accuracy(model, validation),
        active_leaves=active_leaves(model, dataset),
        wall_ms=wall_ms,
        steps=steps,
        phase=phase,
        fast_surrogate=fast_bound,
    )
    logger.info(
        "epoch %d: loss=%.6g bound=%.6g acc=%s val_acc=%s active=%d (%.1f ms)",
        epoch,
        metrics.empirical_loss,
        metrics.surrogate_loss,
        metrics.train_accuracy,
        metrics.val_accuracy,
        metrics.active_leaves,
        wall_ms,
    )
    return metrics


def _feasible_copy(init_model: TreeModel, nu: float) -> TreeModel:
    model = init_model.copy()
    _project_rows(model.W, np.arange(model.W.shape[0]), nu)
    if not np.array_equal(model.W, init_model.W):
        logger.info("Projected infeasible initial rows onto ||w||^2 <= %g", nu)
    return model


def _finish(
    model: TreeModel, trace: List[EpochMetrics], best: _BestTracker
) -> TrainResult:
    if best.model is not None:
        logger.info("Returning model of epoch %d (best validation score)", best.epoch)
        return TrainResult(best.model, trace, best.epoch)
    return TrainResult(model, trace, trace[-1].epoch if trace else None)


def train_sgd(
    dataset: Dataset,
    config: OptimizerConfig,
    init_model: TreeModel,
    validation: Optional[Dataset] = None,
) -> TrainResult:
    """
    Minimize the surrogate objective with projected minibatch SGD for tau steps.

    Data is reshuffled every epoch from config.seed. If a validation set is
    given, the model of the epoch with the best validation accuracy is
    returned, otherwise the final model. init_model is not modified.
    """
    _check_compatible(dataset, init_model)
    if validation is not None:
        _check_compatible(validation, init_model)
    model = init_model.copy()
    trace: List[EpochMetrics] = []
    best = _BestTracker(validation)
    if config.tau == 0:
        return TrainResult(model, trace, None)
    model = _feasible_copy(init_model, config.nu)

    logger.info(
        "SGD: depth=%d n=%d tau=%d nu=%g eta=%g batch=%d momentum=%g inference=%s",
        model.depth,
        len(dataset),
        config.tau,
        config.nu,
        config.eta,
        config.batch_size,
        config.momentum,
        config.inference.value,
    )
    rng = np.random.default_rng(config.seed)
    state = MomentumState.zeros_like(model)
    steps = 0
    epoch = 0
    while steps < config.tau:
        started = time.perf_counter()
        steps += run_epoch(model, dataset, config, state, rng, config.tau - steps)
        wall_ms = (time.perf_counter() - started) * 1e3
        epoch += 1
        metrics = _measure(model, dataset, config, epoch, steps, wall_ms, validation)
        trace.append(metrics)
        best.offer(model, epoch, metrics.val_accuracy)
    return _finish(model, trace, best)


def train_ssgd(
    dataset: Dataset,
    config: OptimizerConfig,
    init_model: TreeModel,
    validation: Optional[Dataset] = None,
) -> TrainResult:
    """
    Stable SGD: optimize the bound under fixed leaf assignments.

    Each phase assigns every example to its current leaf, then runs up to
    ssgd_inner_steps steps; the phase ends early once an epoch improves the
    bound by less than ssgd_rel_improvement (relative).
    """
    _check_compatible(dataset, init_model)
    if validation is not None:
        _check_compatible(validation, init_model)
    model = init_model.copy()
    trace: List[EpochMetrics] = []
    best = _BestTracker(validation)
    if config.tau == 0:
        return TrainResult(model, trace, None)
    model = _feasible_copy(init_model, config.nu)

    logger.info(
        "SSGD: depth=%d n=%d tau=%d nu=%g eta=%g inner=%d rel=%g inference=%s",
        model.depth,
        len(dataset),
        config.tau,
        config.nu,
        config.eta,
        config.ssgd_inner_steps,
        config.ssgd_rel_improvement,
        config.inference.value,
    )
    rng = np.random.default_rng(config.seed)
    state = MomentumState.zeros_like(model)
    steps = 0
    epoch = 0
    phase = 0
    previous_active: Optional[int] = None
    while steps < config.tau:
        phase += 1
        assignments = route(model.W, dataset.X, model.topology)
        active = int(np.unique(assignments).size)
        logger.info(
            "SSGD phase %d: %d active leaves (change %+d)",
            phase,
            active,
            0 if previous_active is None else active - previous_active,
        )
        previous_active = active
        previous = surrogate_loss(model, dataset, BoundMode.SSGD, assignments, config.inference)
        inner = 0
        while inner < config.ssgd_inner_steps and steps < config.tau:
            started = time.perf_counter()
            done = run_epoch(
                model,
                dataset,
                config,
                state,
                rng,
                min(config.ssgd_inner_steps - inner, config.tau - steps),
                assignments,
            )
            wall_ms = (time.perf_counter() - started) * 1e3
            inner += done
            steps += done
            epoch += 1
            metrics = _measure(
                model, dataset, config, epoch, steps, wall_ms, validation, assignments, phase
            )
            trace.append(metrics)
            best.offer(model, epoch, metrics.val_accuracy)
            improvement = (previous - metrics.surrogate_loss) / max(abs(previous), 1e-12)
            previous = metrics.surrogate_loss
            if improvement < config.ssgd_rel_improvement:
                logger.debug("SSGD phase %d converged (relative improvement %.3g)", phase, improvement)
                break
    return _finish(model, trace, best)


def train(
    dataset: Dataset,
    config: OptimizerConfig,
    init_model: TreeModel,
    validation: Optional[Dataset] = None,
) -> TrainResult:
    if config.algorithm == Algorithm.SSGD:
        return train_ssgd(dataset, config, init_model, validation)
    return train_sgd(dataset, config, init_model, validation)


__all__ = [
    "Batch",
    "BatchGradient",
    "EpochMetrics",
    "MomentumState",
    "TrainResult",
    "active_leaves",
    "project_row",
    "run_epoch",
    "sgd_step",
    "surrogate_gradient",
    "train",
    "train_sgd",
    "train_ssgd",
]
