# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
Loss-augmented inference and evaluation of the surrogate bound.

For a leaf j, the best decision vector reaching j agrees with sign(Wx) off
the path to j, so its score is sum_i |w_i.x| minus 2|w_i.x| for every path
node whose sign disagrees with the path direction. Exact inference scores
all m+1 leaves this way; fast inference only looks at sign(Wx) and its d
single-bit flips along the predicted path.

Ties (within TIE_TOL) go to the smallest leaf index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from obtree.config import Inference
from obtree.data_io import Dataset
from obtree.exceptions import ConfigError, DataError, InferenceRefusedError
from obtree.losses import (
    LossKind,
    Target,
    example_losses,
    gathered_losses,
    get_loss,
    leaf_loss_matrix,
    leaf_losses,
)
from obtree.tree_core import (
    TreeModel,
    TreeTopology,
    navigate_batch,
    path_nodes,
    predict_classes,
    predict_leaf,
    route,
    sign,
)

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12
MAX_BRUTE_FORCE_NODES = 20


class BoundMode(str, Enum):
    EXACT = "exact"
    FAST = "fast"
    SSGD = "ssgd"


@dataclass(frozen=True)
class LossAugResult:
    g_hat: np.ndarray
    leaf: int
    value: float


@dataclass(frozen=True)
class PathSolution:
    """
    Loss-augmented maximizer relative to sign(Wx).

    flips lists (node, bit) wherever the maximizer differs from sign(Wx);
    excess is the maximized value minus sum_i |w_i.x|.
    """

    leaf: int
    flips: Tuple[Tuple[int, float], ...]
    excess: float


def _pick(values: np.ndarray, leaves: np.ndarray) -> int:
    """Position of the maximum, smallest leaf among near-ties."""
    best = values.max()
    tied = np.flatnonzero(values >= best - TIE_TOL)
    return int(tied[np.argmin(leaves[tied])])


# -------------------- exact --------------------


def exact_search(
    model: TreeModel, x: np.ndarray, y: Target, scores: Optional[np.ndarray] = None
) -> PathSolution:
    """All m inner products, one top-down pass accumulating disagreement penalties."""
    topology = model.topology
    m = topology.internal_count
    s = model.W @ x if scores is None else scores
    cost = 2.0 * np.abs(s)
    goes_right = s >= 0.0
    penalty = np.zeros(2 * m + 2)
    for level in range(topology.depth):
        nodes = np.arange(2**level, 2 ** (level + 1))
        base = penalty[nodes]
        wrong_left = np.where(goes_right[nodes - 1], cost[nodes - 1], 0.0)
        wrong_right = np.where(goes_right[nodes - 1], 0.0, cost[nodes - 1])
        penalty[2 * nodes] = base + wrong_left
        penalty[2 * nodes + 1] = base + wrong_right
    excess = leaf_losses(model.theta, y, model.task) - penalty[m + 1 :]
    leaves = np.arange(1, m + 2)
    leaf = int(leaves[_pick(excess, leaves)])
    flips = tuple(
        (node, float(direction))
        for node, direction in path_nodes(leaf, topology)
        if (direction > 0) != goes_right[node - 1]
    )
    return PathSolution(leaf, flips, float(excess[leaf - 1]))


def _expand(solution: PathSolution, scores: np.ndarray) -> LossAugResult:
    g_hat = sign(scores)
    for node, bit in solution.flips:
        g_hat[node - 1] = bit
    return LossAugResult(g_hat, solution.leaf, float(np.abs(scores).sum() + solution.excess))


def exact_loss_aug(model: TreeModel, x: np.ndarray, y: Target) -> LossAugResult:
    scores = model.W @ x
    return _expand(exact_search(model, x, y, scores), scores)


# -------------------- fast (Hamming ball of radius 1) --------------------


def fast_search(model: TreeModel, x: np.ndarray, y: Target) -> PathSolution:
    """
    Best of sign(Wx) and its d on-path single-bit flips.

    Off-path flips keep the leaf and lower the score, so they are skipped.
    Each flip redirects into the sibling subtree, which is descended by sign
    decisions. All candidates advance one level at a time (candidate 0 is the
    predicted path, candidate l+1 flips the path node at level l), so total
    work is O(d^2 p~).
    """
    W = model.W
    m = model.topology.internal_count
    frontier = np.ones(1, dtype=np.int64)
    penalties = [0.0]
    flips: list = [()]
    for _ in range(model.topology.depth):
        scores = W[frontier - 1] @ x
        right = scores >= 0.0
        node = int(frontier[0])
        flipped_child = 2 * node + (0 if right[0] else 1)
        frontier = np.append(2 * frontier + right, flipped_child)
        penalties.append(2.0 * abs(float(scores[0])))
        flips.append(((node, -1.0 if right[0] else 1.0),))
    leaf_arr = frontier - m
    excess = leaf_losses(model.theta[leaf_arr - 1], y, model.task) - np.asarray(penalties)
    best = _pick(excess, leaf_arr)
    return PathSolution(int(leaf_arr[best]), flips[best], float(excess[best]))


def fast_loss_aug(model: TreeModel, x: np.ndarray, y: Target) -> LossAugResult:
    return _expand(fast_search(model, x, y), model.W @ x)


def search(
    model: TreeModel, x: np.ndarray, y: Target, inference: Inference
) -> PathSolution:
    if Inference(inference) == Inference.EXACT:
        return exact_search(model, x, y)
    return fast_search(model, x, y)


# -------------------- batched search (training) --------------------


@dataclass(frozen=True)
class BatchSolution:
    """
    PathSolution for every row of a batch, flips flattened.

    Entry e says that the maximizer of example flip_examples[e] takes
    flip_bits[e] at flip_nodes[e], against sign(Wx).
    """

    leaves: np.ndarray
    flip_examples: np.ndarray
    flip_nodes: np.ndarray
    flip_bits: np.ndarray
    excess: np.ndarray


Disagreements = Tuple[np.ndarray, np.ndarray, np.ndarray]


def _path_disagreements(
    leaves: np.ndarray, topology: TreeTopology, goes_right: Callable[[np.ndarray, np.ndarray], np.ndarray]
) -> Disagreements:
    """(example, node, direction) wherever the path to leaves[example] leaves sign(Wx)."""
    rows = np.arange(leaves.size)
    heap = leaves + topology.internal_count
    examples, nodes, bits = [], [], []
    for _ in range(topology.depth):
        node = heap // 2
        right = heap % 2 == 1
        wrong = right != goes_right(rows, node)
        examples.append(rows[wrong])
        nodes.append(node[wrong])
        bits.append(np.where(right[wrong], 1.0, -1.0))
        heap = node
    if not examples:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(examples), np.concatenate(nodes), np.concatenate(bits)


def exact_search_batch(model: TreeModel, X: np.ndarray, targets: np.ndarray) -> BatchSolution:
    topology = model.topology
    m = topology.internal_count
    S = X @ model.W.T
    cost = 2.0 * np.abs(S)
    goes_right = S >= 0.0
    penalty = np.zeros((X.shape[0], 2 * m + 2))
    for level in range(topology.depth):
        nodes = np.arange(2**level, 2 ** (level + 1))
        base = penalty[:, nodes]
        right = goes_right[:, nodes - 1]
        node_cost = cost[:, nodes - 1]
        penalty[:, 2 * nodes] = base + np.where(right, node_cost, 0.0)
        penalty[:, 2 * nodes + 1] = base + np.where(right, 0.0, node_cost)
    excess = leaf_loss_matrix(model.theta, targets, model.task) - penalty[:, m + 1 :]
    best = excess.max(axis=1)
    # argmax of the tie mask is the first, i.e. smallest, tied leaf
    picked = np.argmax(excess >= (best - TIE_TOL)[:, None], axis=1)
    leaves = picked + 1
    flips = _path_disagreements(leaves, topology, lambda rows, node: goes_right[rows, node - 1])
    return BatchSolution(leaves, *flips, excess[np.arange(X.shape[0]), picked])


def fast_search_batch(model: TreeModel, X: np.ndarray, targets: np.ndarray) -> BatchSolution:
    """fast_search for a batch; every level is one gather and one contraction."""
    W = model.W
    depth = model.topology.depth
    batch = X.shape[0]
    rows = np.arange(batch)
    frontier = np.ones((batch, 1), dtype=np.int64)
    penalties = np.zeros((batch, depth + 1))
    flip_nodes = np.zeros((batch, depth + 1), dtype=np.int64)
    flip_bits = np.zeros((batch, depth + 1))
    for level in range(depth):
        scores = np.einsum("bcj,bj->bc", W[frontier - 1], X)
        right = scores >= 0.0
        node = frontier[:, 0]
        flipped_child = 2 * node + ~right[:, 0]
        frontier = np.hstack([2 * frontier + right, flipped_child[:, None]])
        penalties[:, level + 1] = 2.0 * np.abs(scores[:, 0])
        flip_nodes[:, level + 1] = node
        flip_bits[:, level + 1] = np.where(right[:, 0], -1.0, 1.0)
    leaf_idx = frontier - model.topology.internal_count
    excess = gathered_losses(model.theta, leaf_idx - 1, targets, model.task) - penalties
    best = excess.max(axis=1)
    tied = excess >= (best - TIE_TOL)[:, None]
    choice = np.argmin(np.where(tied, leaf_idx, np.iinfo(np.int64).max), axis=1)
    flipped = choice > 0
    return BatchSolution(
        leaf_idx[rows, choice],
        rows[flipped],
        flip_nodes[rows, choice][flipped],
        flip_bits[rows, choice][flipped],
        excess[rows, choice],
    )


def search_batch(
    model: TreeModel, X: np.ndarray, targets: np.ndarray, inference: Inference
) -> BatchSolution:
    if Inference(inference) == Inference.EXACT:
        return exact_search_batch(model, X, targets)
    return fast_search_batch(model, X, targets)


def assignment_disagreements(
    model: TreeModel, X: np.ndarray, leaves: np.ndarray
) -> Disagreements:
    """assignment_penalty's forced (node, direction) pairs for a batch, flattened."""
    W = model.W

    def goes_right(rows: np.ndarray, node: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", W[node - 1], X[rows]) >= 0.0

    return _path_disagreements(np.asarray(leaves, dtype=np.int64), model.topology, goes_right)


# -------------------- brute force oracle --------------------


def _all_decision_vectors(m: int) -> np.ndarray:
    """Every +-1 vector of length m in lexicographic order (-1 before +1)."""
    codes = np.arange(2**m, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(m - 1, -1, -1)) & 1
    return 2.0 * bits - 1.0


def brute_force_loss_aug(
    model: TreeModel, x: np.ndarray, y: Target, radius: Optional[int] = None
) -> LossAugResult:
    """
    Exhaustive maximization over all 2^m decision vectors.

    With `radius`, only vectors within that Hamming distance of sign(Wx) are
    considered. Ties go to the smallest leaf, then the lexicographically
    smallest vector.
    """
    m = model.topology.internal_count
    if m > MAX_BRUTE_FORCE_NODES:
        raise InferenceRefusedError(
            f"refusing to enumerate 2^{m} decision vectors (limit m <= {MAX_BRUTE_FORCE_NODES})"
        )
    s = model.W @ x
    G = _all_decision_vectors(m)
    if radius is not None:
        G = G[np.count_nonzero(G != sign(s), axis=1) <= radius]
    leaves = navigate_batch(G, model.topology)
    values = G @ s + leaf_losses(model.theta, y, model.task)[leaves - 1]
    best = _pick(values, leaves)
    return LossAugResult(G[best].copy(), int(leaves[best]), float(values[best]))


# -------------------- constrained score (fixed leaf assignment) --------------------


def assignment_penalty(
    model: TreeModel, x: np.ndarray, leaf: int
) -> Tuple[float, Tuple[Tuple[int, float], ...]]:
    """
    Score lost by forcing x down to `leaf`.

    Returns sum_i |w_i.x| minus the constrained maximum, together with the
    (node, direction) pairs where the forced path disagrees with sign(Wx).
    Only the d path products are computed.
    """
    penalty = 0.0
    forced = []
    for node, direction in path_nodes(leaf, model.topology):
        score = float(model.W[node - 1] @ x)
        if (direction > 0) != (score >= 0.0):
            penalty += 2.0 * abs(score)
            forced.append((node, float(direction)))
    return penalty, tuple(forced)


def constrained_score(
    model: TreeModel, x: np.ndarray, a: int
) -> Tuple[np.ndarray, float]:
    """max of h.Wx over decision vectors h that navigate to leaf a."""
    model.topology.check_leaf(a)
    s = model.W @ x
    h = sign(s)
    for node, direction in path_nodes(a, model.topology):
        h[node - 1] = direction
    return h, float(h @ s)


# -------------------- bounds and losses --------------------


def example_loss(model: TreeModel, x: np.ndarray, y: Target) -> float:
    """l(theta_f(sign(Wx)), y)."""
    leaf = predict_leaf(model.W, x, model.topology)
    return get_loss(model.task).value(model.theta[leaf - 1], y)


def surrogate_per_example(
    model: TreeModel,
    x: np.ndarray,
    y: Target,
    mode: BoundMode = BoundMode.EXACT,
    assignment: Optional[int] = None,
    inference: Inference = Inference.FAST,
) -> float:
    """
    Upper bound on the loss of (x, y).

    exact/fast: loss-augmented maximum minus max_h h.Wx. ssgd: the subtracted
    term is restricted to decision vectors reaching `assignment`, and the
    first term uses `inference`.
    """
    mode = BoundMode(mode)
    if mode == BoundMode.EXACT:
        return exact_search(model, x, y).excess
    if mode == BoundMode.FAST:
        return fast_search(model, x, y).excess
    if assignment is None:
        raise ConfigError("ssgd bound needs a leaf assignment")
    penalty, _ = assignment_penalty(model, x, assignment)
    return search(model, x, y, inference).excess + penalty


def _check_nonempty(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise DataError("empty dataset")


def empirical_loss(model: TreeModel, dataset: Dataset) -> float:
    """Sum of per-example losses of the hard tree."""
    _check_nonempty(dataset)
    leaves = route(model.W, dataset.X, model.topology)
    return math.fsum(example_losses(model.theta[leaves - 1], dataset.targets, model.task))


def surrogate_loss(
    model: TreeModel,
    dataset: Dataset,
    mode: BoundMode = BoundMode.EXACT,
    assignments: Optional[Sequence[int]] = None,
    inference: Inference = Inference.FAST,
) -> float:
    """Sum of surrogate_per_example over the dataset."""
    _check_nonempty(dataset)
    mode = BoundMode(mode)
    if mode == BoundMode.SSGD and (assignments is None or len(assignments) != len(dataset)):
        raise ConfigError("ssgd bound needs one leaf assignment per example")
    X, targets = dataset.X, dataset.targets
    return math.fsum(
        surrogate_per_example(
            model,
            X[i],
            targets[i],
            mode,
            None if assignments is None else int(assignments[i]),
            inference,
        )
        for i in range(len(dataset))
    )


def accuracy(model: TreeModel, dataset: Dataset) -> Optional[float]:
    """Fraction of correctly classified examples; None for regression."""
    _check_nonempty(dataset)
    if dataset.task != LossKind.LOG:
        return None
    return float(np.mean(predict_classes(model, dataset.X) == dataset.targets))
