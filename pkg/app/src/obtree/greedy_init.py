# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
Greedy tree builders used as baselines and as initialization.

Both builders grow the tree top-down and write every split straight into an
oblique model, so the result can be handed to the non-greedy optimizer
unchanged. A branch that stops early keeps zero split rows below it (all
data flows right under sign(0) = +1) and every leaf of the padded subtree
gets the stopped node's leaf parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import entropy

from obtree.config import NU, Algorithm, GreedyConfig, Inference, OptimizerConfig
from obtree.data_io import Dataset
from obtree.exceptions import ConfigError, DataError, DimensionError
from obtree.losses import LossKind
from obtree.optimizer import MomentumState, project_row, run_epoch
from obtree.tree_core import TreeModel, TreeTopology, route

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AxisSplit:
    """Go right iff x_f > threshold (f is a 0-based column)."""

    feature: int
    threshold: float
    gain: float

    def oblique_row(self, width: int, nu: float) -> np.ndarray:
        """Row w with sign(w.x~) == sign(x_f - t), scaled into ||w||^2 <= nu."""
        row = np.zeros(width)
        row[self.feature] = 1.0
        row[-1] = self.threshold
        norm_sq = 1.0 + self.threshold**2
        if norm_sq > nu:
            row *= math.sqrt(nu / norm_sq)
        return row


# -------------------- impurity --------------------


def _target_stats(dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    """Per-example sufficient statistics: one-hot labels, or [y, y^2] for regression."""
    if dataset.task == LossKind.LOG:
        return np.eye(dataset.num_classes)[dataset.targets[idx] - 1]
    y = dataset.targets[idx]
    return np.hstack([y, y * y])


def _impurity(stats: np.ndarray, counts: np.ndarray, task: LossKind) -> np.ndarray:
    """Entropy (base 2) of class counts, or summed variance for regression; 0 for empty sides."""
    occupied = counts > 0
    safe_counts = np.where(occupied, counts, 1.0)
    if task == LossKind.LOG:
        safe_stats = np.where(occupied[..., None], stats, 1.0)
        values = entropy(safe_stats, base=2, axis=-1)
    else:
        q = stats.shape[-1] // 2
        mean = stats[..., :q] / safe_counts[..., None]
        values = (stats[..., q:] / safe_counts[..., None] - mean * mean).sum(axis=-1)
        values = np.maximum(values, 0.0)
    return np.where(occupied, values, 0.0)


def _gain(
    total: np.ndarray, n: int, left: np.ndarray, n_left: np.ndarray, task: LossKind
) -> np.ndarray:
    n_right = n - n_left
    right = total - left
    parent = _impurity(total, np.asarray(float(n)), task)
    return (
        parent
        - (n_left / n) * _impurity(left, n_left, task)
        - (n_right / n) * _impurity(right, n_right, task)
    )


def info_gain(labels_left: Sequence[int], labels_right: Sequence[int]) -> float:
    """Information gain (bits) of splitting the union of both label lists into the two sides."""
    left = np.asarray(labels_left, dtype=np.int64)
    right = np.asarray(labels_right, dtype=np.int64)
    if left.size + right.size == 0:
        raise DataError("info gain of an empty split")
    k = int(max(left.max(initial=0), right.max(initial=0)))
    left_counts = np.bincount(left, minlength=k + 1)[1:].astype(float)
    right_counts = np.bincount(right, minlength=k + 1)[1:].astype(float)
    n = left.size + right.size
    value = _gain(
        left_counts + right_counts, n, left_counts, np.asarray(float(left.size)), LossKind.LOG
    )
    return max(float(value), 0.0)


# -------------------- leaf parameters --------------------


def node_parameters(dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    """
    Leaf parameters fitted to the examples idx.

    Laplace-smoothed log class frequencies log((c+1)/(n+k)) for classification,
    the mean target for regression, a zero row when idx is empty.
    """
    k = dataset.num_classes
    if idx.size == 0:
        return np.zeros(k)
    if dataset.task == LossKind.LOG:
        counts = np.bincount(dataset.targets[idx] - 1, minlength=k)
        return np.log((counts + 1.0) / (idx.size + k))
    return dataset.targets[idx].mean(axis=0)


def leaf_parameters(
    dataset: Dataset, leaves: np.ndarray, topology: TreeTopology
) -> np.ndarray:
    """Theta from a routing of the dataset (one leaf index per example)."""
    theta = np.zeros((topology.leaf_count, dataset.num_classes))
    for leaf in range(1, topology.leaf_count + 1):
        theta[leaf - 1] = node_parameters(dataset, np.flatnonzero(leaves == leaf))
    return theta


# -------------------- builders --------------------


def _check_buildable(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise DataError("cannot grow a tree on an empty dataset")
    if not dataset.augmented:
        raise DimensionError("greedy builders need an augmented dataset")


def _is_pure(dataset: Dataset, idx: np.ndarray) -> bool:
    targets = dataset.targets[idx]
    return bool(np.all(targets == targets[0]))


def best_axis_split(dataset: Dataset, idx: np.ndarray) -> Optional[AxisSplit]:
    """
    Highest-gain (feature, midpoint threshold) over the examples idx.

    Every feature is scanned in one pass over its sorted values using
    cumulative target statistics. The first feature and the lowest threshold
    win ties. Returns None when every feature is constant on idx.
    """
    X = dataset.X[idx, : dataset.num_features]
    stats = _target_stats(dataset, idx)
    total = stats.sum(axis=0)
    n = idx.size
    best: Optional[AxisSplit] = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        values = X[order, f]
        cuts = np.flatnonzero(values[1:] > values[:-1])
        if cuts.size == 0:
            continue
        left = np.cumsum(stats[order], axis=0)[cuts]
        gains = _gain(total, n, left, (cuts + 1).astype(float), dataset.task)
        pick = int(np.argmax(gains))
        if best is None or gains[pick] > best.gain:
            threshold = 0.5 * (values[cuts[pick]] + values[cuts[pick] + 1])
            best = AxisSplit(f, float(threshold), float(gains[pick]))
    return best


def _fill_subtree(theta: np.ndarray, topology: TreeTopology, node: int, row: np.ndarray) -> None:
    if node > topology.internal_count:
        theta[node - topology.internal_count - 1] = row
        return
    leaves = topology.subtree_leaves(node)
    theta[leaves.start - 1 : leaves.stop - 1] = row


def build_axis_aligned(
    dataset: Dataset,
    depth: int,
    nu: float = NU,
    config: Optional[GreedyConfig] = None,
) -> TreeModel:
    """Greedy information-gain tree with single-feature threshold splits."""
    _check_buildable(dataset)
    if not nu > 0:
        raise ConfigError(f"nu must be positive, got {nu}")
    config = config or GreedyConfig()
    model = TreeModel.zeros(depth, dataset.width, dataset.num_classes, dataset.task)
    topology = model.topology
    X = dataset.X
    splits = 0

    def grow(node: int, idx: np.ndarray) -> None:
        nonlocal splits
        split = None
        if (
            node <= topology.internal_count
            and idx.size >= config.min_samples_split
            and not _is_pure(dataset, idx)
        ):
            split = best_axis_split(dataset, idx)
        if split is None:
            _fill_subtree(model.theta, topology, node, node_parameters(dataset, idx))
            return
        row = split.oblique_row(dataset.width, nu)
        model.W[node - 1] = row
        splits += 1
        right = X[idx] @ row >= 0.0
        grow(2 * node, idx[~right])
        grow(2 * node + 1, idx[right])

    grow(1, np.arange(len(dataset)))
    logger.info("Axis-aligned tree: depth %d, %d of %d nodes split", depth, splits, topology.internal_count)
    return model


def build_random_oblique(
    dataset: Dataset,
    depth: int,
    trials_per_node: int,
    seed: int = 0,
    nu: float = NU,
    config: Optional[GreedyConfig] = None,
) -> TreeModel:
    """Per node, the best of trials_per_node random hyperplanes of norm sqrt(nu) by information gain."""
    _check_buildable(dataset)
    if trials_per_node < 1:
        raise ConfigError(f"trials_per_node must be positive, got {trials_per_node}")
    if not nu > 0:
        raise ConfigError(f"nu must be positive, got {nu}")
    config = config or GreedyConfig()
    rng = np.random.default_rng(seed)
    model = TreeModel.zeros(depth, dataset.width, dataset.num_classes, dataset.task)
    topology = model.topology
    X = dataset.X

    def grow(node: int, idx: np.ndarray) -> None:
        if (
            node > topology.internal_count
            or idx.size < config.min_samples_split
            or _is_pure(dataset, idx)
        ):
            _fill_subtree(model.theta, topology, node, node_parameters(dataset, idx))
            return
        candidates = rng.standard_normal((trials_per_node, dataset.width))
        norms = np.linalg.norm(candidates, axis=1)
        candidates *= (math.sqrt(nu) / np.where(norms > 0, norms, 1.0))[:, None]
        goes_right = (X[idx] @ candidates.T >= 0.0).astype(float)
        stats = _target_stats(dataset, idx)
        right_stats = goes_right.T @ stats
        total = stats.sum(axis=0)
        # gain is symmetric in the two sides, so scoring the right side as "left" is fine
        gains = _gain(total, idx.size, right_stats, goes_right.sum(axis=0), dataset.task)
        pick = int(np.argmax(gains))
        model.W[node - 1] = candidates[pick]
        right = goes_right[:, pick] > 0
        grow(2 * node, idx[~right])
        grow(2 * node + 1, idx[right])

    grow(1, np.arange(len(dataset)))
    logger.info("Random oblique tree: depth %d, %d trials per node, seed %d", depth, trials_per_node, seed)
    return model


# -------------------- CO2 refinement --------------------


def _examples_at(model: TreeModel, X: np.ndarray, node: int) -> np.ndarray:
    """Indices of the examples whose path passes through internal node `node`."""
    level = node.bit_length() - 1
    nodes = np.ones(X.shape[0], dtype=np.int64)
    for _ in range(level):
        scores = np.einsum("ij,ij->i", model.W[nodes - 1], X)
        nodes = 2 * nodes + (scores >= 0.0)
    return np.flatnonzero(nodes == node)


def _descend(model: TreeModel, dataset: Dataset, config: OptimizerConfig, seed: int) -> None:
    """config.tau projected SGD steps on model in place, without per-epoch metrics."""
    rng = np.random.default_rng(seed)
    state = MomentumState.zeros_like(model)
    steps = 0
    while steps < config.tau:
        steps += run_epoch(model, dataset, config, state, rng, config.tau - steps)


def co2_refine(
    model: TreeModel,
    dataset: Dataset,
    config: OptimizerConfig,
    greedy: Optional[GreedyConfig] = None,
    steps_per_node: Optional[int] = None,
) -> TreeModel:
    """
    Refine each split in breadth-first order as a depth-1 surrogate problem.

    At node i the examples currently routed to i are split by w_i; the two
    pseudo-leaves are fitted to the current left and right parts, and w_i is
    refined by projected SGD with exact inference. Nodes without data are
    left as they are. Theta is refitted to the final routing. `model` is not
    modified.
    """
    if dataset.width != model.features:
        raise DimensionError(
            f"dataset has {dataset.width} columns, model expects {model.features}"
        )
    steps = (greedy or GreedyConfig()).co2_steps if steps_per_node is None else steps_per_node
    refined = model.copy()
    topology = refined.topology
    X = dataset.X
    node_config = replace(
        config, tau=steps, algorithm=Algorithm.SGD, inference=Inference.EXACT
    )
    stump = TreeTopology(1)
    if steps > 0:
        for node in range(1, topology.internal_count + 1):
            idx = _examples_at(refined, X, node)
            if idx.size == 0:
                logger.debug("CO2: node %d has no data, skipped", node)
                continue
            row = refined.W[node - 1]
            right = X[idx] @ row >= 0.0
            theta = np.vstack(
                [node_parameters(dataset, idx[~right]), node_parameters(dataset, idx[right])]
            )
            start = project_row(row, config.nu)[None, :].copy()
            subproblem = TreeModel(stump, start, theta, refined.task)
            _descend(subproblem, dataset.subset(idx), node_config, (config.seed + node) % 2**64)
            refined.W[node - 1] = subproblem.W[0]
            logger.debug("CO2: node %d refined on %d examples", node, idx.size)
    refined.theta = leaf_parameters(dataset, route(refined.W, X, topology), topology)
    logger.info("CO2 refinement done: %d nodes, %d steps per node", topology.internal_count, steps)
    return refined
