# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
Complete binary oblique trees in heap layout.

Internal nodes are numbered 1..m with children 2i (left) and 2i+1 (right);
leaf j (1-based, left to right) sits at heap index m + j. Row i-1 of W holds
the split weights of node i, row j-1 of theta the parameters of leaf j.
Inputs are already augmented with a trailing -1, so the last column of W
plays the role of the threshold.

sign(0) is +1 everywhere in the package: a zero score sends the example right.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, TextIO, Tuple

import numpy as np
from scipy.special import softmax

from obtree.exceptions import DataError, DimensionError, NumericError, StructureError
from obtree.losses import LossKind

logger = logging.getLogger(__name__)

MAGIC = "OBTREE 1"


def sign(values: np.ndarray) -> np.ndarray:
    """Entry-wise sign with sign(0) = +1."""
    return np.where(np.asarray(values) >= 0.0, 1.0, -1.0)


@dataclass(frozen=True)
class TreeTopology:
    depth: int

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise StructureError(f"depth must be at least 1, got {self.depth}")

    @property
    def internal_count(self) -> int:
        return 2**self.depth - 1

    @property
    def leaf_count(self) -> int:
        return 2**self.depth

    def heap_index(self, leaf: int) -> int:
        self.check_leaf(leaf)
        return self.internal_count + leaf

    def check_leaf(self, leaf: int) -> None:
        if not 1 <= leaf <= self.leaf_count:
            raise StructureError(f"leaf {leaf} outside 1..{self.leaf_count}")

    def check_node(self, node: int) -> None:
        if not 1 <= node <= self.internal_count:
            raise StructureError(f"node {node} outside 1..{self.internal_count}")

    def subtree_leaves(self, node: int) -> range:
        """Leaves below internal node `node`, as a contiguous range of leaf indices."""
        self.check_node(node)
        level = node.bit_length() - 1
        span = 2 ** (self.depth - level)
        first_heap = node * span
        first = first_heap - self.internal_count
        return range(first, first + span)


@dataclass
class TreeModel:
    """
    Split weights W (m x p~) and leaf parameters theta ((m+1) x k).

    The model is treated as immutable by inference; only the optimizer
    writes to W and theta.
    """

    topology: TreeTopology
    W: np.ndarray
    theta: np.ndarray
    task: LossKind = LossKind.LOG

    def __post_init__(self) -> None:
        self.task = LossKind(self.task)
        self.W = np.asarray(self.W, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        m = self.topology.internal_count
        if self.W.ndim != 2 or self.W.shape[0] != m:
            raise DimensionError(f"W must have {m} rows, got shape {self.W.shape}")
        if self.theta.ndim != 2 or self.theta.shape[0] != m + 1:
            raise DimensionError(
                f"theta must have {m + 1} rows, got shape {self.theta.shape}"
            )

    @classmethod
    def zeros(
        cls, depth: int, features: int, classes: int, task: LossKind = LossKind.LOG
    ) -> "TreeModel":
        topology = TreeTopology(depth)
        return cls(
            topology,
            np.zeros((topology.internal_count, features)),
            np.zeros((topology.leaf_count, classes)),
            task,
        )

    @property
    def depth(self) -> int:
        return self.topology.depth

    @property
    def features(self) -> int:
        return int(self.W.shape[1])

    @property
    def classes(self) -> int:
        return int(self.theta.shape[1])

    def copy(self) -> "TreeModel":
        return TreeModel(self.topology, self.W.copy(), self.theta.copy(), self.task)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.W)):
            raise NumericError("split weights contain non-finite values")
        if not np.all(np.isfinite(self.theta)):
            raise NumericError("leaf parameters contain non-finite values")

    def row_norms_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.W, self.W)

    def is_feasible(self, nu: float, tol: float = 1e-9) -> bool:
        return bool(np.all(self.row_norms_sq() <= nu + tol))


# -------------------- navigation --------------------


def navigate(h: np.ndarray, topology: TreeTopology) -> int:
    """Leaf reached by following decision vector h from the root."""
    bits = np.asarray(h)
    m = topology.internal_count
    if bits.shape != (m,):
        raise StructureError(f"decision vector must have {m} entries, got {bits.shape}")
    node = 1
    for _ in range(topology.depth):
        node = 2 * node + (1 if bits[node - 1] > 0 else 0)
    return node - m


def navigate_batch(H: np.ndarray, topology: TreeTopology) -> np.ndarray:
    """navigate() for every row of H."""
    bits = np.asarray(H)
    m = topology.internal_count
    if bits.ndim != 2 or bits.shape[1] != m:
        raise StructureError(f"decision vectors must have {m} columns, got {bits.shape}")
    rows = np.arange(bits.shape[0])
    nodes = np.ones(bits.shape[0], dtype=np.int64)
    for _ in range(topology.depth):
        nodes = 2 * nodes + (bits[rows, nodes - 1] > 0)
    return nodes - m


def _check_features(W: np.ndarray, x: np.ndarray) -> None:
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"input has {x.shape[-1]} features, model expects {W.shape[1]}"
        )


def decisions(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sign(Wx) as a +-1 vector."""
    _check_features(W, x)
    return sign(W @ x)


def predict_leaf(W: np.ndarray, x: np.ndarray, topology: TreeTopology) -> int:
    """Leaf of x, computing only the d inner products on its path."""
    _check_features(W, x)
    node = 1
    for _ in range(topology.depth):
        node = 2 * node + (1 if W[node - 1] @ x >= 0.0 else 0)
    return node - topology.internal_count


def route(W: np.ndarray, X: np.ndarray, topology: TreeTopology) -> np.ndarray:
    """predict_leaf() for every row of X."""
    _check_features(W, X)
    nodes = np.ones(X.shape[0], dtype=np.int64)
    for _ in range(topology.depth):
        scores = np.einsum("ij,ij->i", W[nodes - 1], X)
        nodes = 2 * nodes + (scores >= 0.0)
    return nodes - topology.internal_count


def path_nodes(leaf: int, topology: TreeTopology) -> List[Tuple[int, int]]:
    """(node, direction) pairs from the root to `leaf`; -1 is left, +1 right."""
    heap = topology.heap_index(leaf)
    path = []
    while heap > 1:
        path.append((heap // 2, 1 if heap % 2 else -1))
        heap //= 2
    path.reverse()
    return path


# -------------------- prediction --------------------


def predict_distribution(model: TreeModel, x: np.ndarray) -> np.ndarray:
    theta = model.theta[predict_leaf(model.W, x, model.topology) - 1]
    if not np.all(np.isfinite(theta)):
        raise NumericError("leaf parameters contain non-finite values")
    return softmax(theta)


def predict_class(model: TreeModel, x: np.ndarray) -> int:
    """Most probable class of x; the first class wins ties."""
    return int(np.argmax(model.theta[predict_leaf(model.W, x, model.topology) - 1])) + 1


def predict_value(model: TreeModel, x: np.ndarray) -> np.ndarray:
    return model.theta[predict_leaf(model.W, x, model.topology) - 1].copy()


def predict_classes(model: TreeModel, X: np.ndarray) -> np.ndarray:
    leaves = route(model.W, X, model.topology)
    return np.argmax(model.theta[leaves - 1], axis=1) + 1


# -------------------- serialization --------------------


def _format_row(row: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in row)


def save_model(model: TreeModel, stream: TextIO) -> None:
    stream.write(MAGIC + "\n")
    stream.write(
        f"depth {model.depth} features {model.features} "
        f"classes {model.classes} task {model.task.value}\n"
    )
    for row in model.W:
        stream.write(_format_row(row) + "\n")
    for row in model.theta:
        stream.write(_format_row(row) + "\n")


def _parse_row(text: str, width: int, line: int) -> np.ndarray:
    tokens = text.split()
    if len(tokens) != width:
        raise DataError(f"expected {width} values, found {len(tokens)}", line)
    try:
        row = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise DataError(f"malformed number ({exc})", line) from None
    if not np.all(np.isfinite(row)):
        raise DataError("non-finite value", line)
    return row


def load_model(stream: TextIO) -> TreeModel:
    lines = stream.read().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise DataError(f"missing '{MAGIC}' header", 1)
    header = lines[1].split() if len(lines) > 1 else []
    if len(header) != 8 or header[0::2] != ["depth", "features", "classes", "task"]:
        raise DataError("malformed header, expected 'depth D features P classes K task T'", 2)
    try:
        depth, features, classes = int(header[1]), int(header[3]), int(header[5])
        task = LossKind(header[7])
        topology = TreeTopology(depth)
    except ValueError as exc:
        raise DataError(f"malformed header ({exc})", 2) from None
    m = topology.internal_count
    expected = 2 + m + m + 1
    if len(lines) != expected:
        raise DataError(f"expected {expected} lines, found {len(lines)}", len(lines))
    W = np.vstack([_parse_row(lines[2 + i], features, 3 + i) for i in range(m)])
    theta = np.vstack(
        [_parse_row(lines[2 + m + j], classes, 3 + m + j) for j in range(m + 1)]
    )
    logger.debug("Loaded depth-%d model with %d features, %d classes", depth, features, classes)
    return TreeModel(topology, W, theta, task)
