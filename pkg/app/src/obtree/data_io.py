# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
LibSVM datasets, input augmentation, seeded splits and synthetic data.

LibSVM lines look like ``<label> <idx>:<val> <idx>:<val> ...`` with 1-based,
strictly increasing indices; ``#`` starts a comment. Raw class labels are
mapped to 1..k by their sorted order. Features are held in a CSR matrix with
0-based columns; explicit zeros read from a file are kept.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy import sparse

from obtree.exceptions import ConfigError, DataError, DimensionError
from obtree.losses import LossKind
from obtree.tree_core import TreeTopology, route

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"\S+")
_INDEX = re.compile(r"[0-9]+")


def _canonical(matrix: sparse.spmatrix) -> sparse.csr_matrix:
    csr = sparse.csr_matrix(matrix, dtype=float)
    csr.sort_indices()
    return csr


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Examples in sparse form plus a dense view for the optimizer.

    matrix is n x width in CSR form. targets holds 1-based class labels
    (shape n) for the log task and target vectors (shape n x q) for the
    squared task. num_features is p, the width before augmentation; an
    augmented dataset has p + 1 columns.
    """

    matrix: sparse.csr_matrix
    targets: np.ndarray
    num_features: int
    task: LossKind = LossKind.LOG
    label_values: Tuple[float, ...] = ()
    augmented: bool = False

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.targets), self.width):
            raise DimensionError(
                f"feature matrix {self.matrix.shape} does not match "
                f"{len(self.targets)} examples of width {self.width}"
            )

    def __len__(self) -> int:
        return int(self.matrix.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        a, b = self.matrix, other.matrix
        return (
            a.shape == b.shape
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
            and np.array_equal(self.targets, other.targets)
            and self.num_features == other.num_features
            and self.task == other.task
            and self.label_values == other.label_values
            and self.augmented == other.augmented
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def width(self) -> int:
        """p~, the number of dense columns."""
        return self.num_features + (1 if self.augmented else 0)

    @property
    def num_classes(self) -> int:
        if self.task == LossKind.LOG:
            return len(self.label_values)
        return int(self.targets.shape[1])

    @cached_property
    def X(self) -> np.ndarray:
        dense = self.matrix.toarray()
        dense.setflags(write=False)
        return dense

    @classmethod
    def from_dense(
        cls,
        X: np.ndarray,
        targets: np.ndarray,
        task: LossKind = LossKind.LOG,
        label_values: Optional[Sequence[float]] = None,
    ) -> "Dataset":
        """Build a dataset from a dense matrix; zero entries are not stored."""
        X = np.asarray(X, dtype=float)
        targets = np.asarray(targets)
        if task == LossKind.LOG:
            targets = targets.astype(np.int64)
            if label_values is None:
                label_values = tuple(float(c) for c in range(1, int(targets.max(initial=0)) + 1))
        else:
            targets = targets.astype(float).reshape(X.shape[0], -1)
            label_values = ()
        return cls(_canonical(X), targets, X.shape[1], LossKind(task), tuple(label_values))

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.fromiter(indices, dtype=np.int64)
        return Dataset(
            _canonical(self.matrix[idx]),
            self.targets[idx],
            self.num_features,
            self.task,
            self.label_values,
            self.augmented,
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if (
            self.num_features != other.num_features
            or self.task != other.task
            or self.label_values != other.label_values
            or self.augmented != other.augmented
        ):
            raise DimensionError("cannot concatenate datasets with different layouts")
        return Dataset(
            _canonical(sparse.vstack([self.matrix, other.matrix], format="csr")),
            np.concatenate([self.targets, other.targets]),
            self.num_features,
            self.task,
            self.label_values,
            self.augmented,
        )

    def with_num_features(self, p: int) -> "Dataset":
        """Widen the feature space to p (e.g. a test file with fewer columns)."""
        if self.augmented:
            raise DimensionError("cannot widen an augmented dataset")
        if p < self.num_features:
            raise DimensionError(
                f"dataset has {self.num_features} features, cannot shrink to {p}"
            )
        m = self.matrix
        wide = sparse.csr_matrix((m.data, m.indices, m.indptr), shape=(m.shape[0], p))
        return Dataset(wide, self.targets, p, self.task, self.label_values, False)

    def content_hash(self) -> str:
        buffer = io.StringIO()
        write_libsvm(self, buffer)
        digest = hashlib.sha256(f"p={self.num_features}\n".encode())
        digest.update(buffer.getvalue().encode())
        return digest.hexdigest()


# -------------------- LibSVM text format --------------------


def _parse_float(token: str, what: str, line: int, column: int) -> float:
    # float() also takes "1_0" and non-ASCII digits
    if "_" in token or not token.isascii():
        raise DataError(f"malformed {what} {token!r}", line, column)
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"malformed {what} {token!r}", line, column) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite {what} {token!r}", line, column)
    return value


def parse_libsvm(
    stream: TextIO,
    task: Union[LossKind, str] = LossKind.LOG,
    label_values: Optional[Sequence[float]] = None,
    num_features: Optional[int] = None,
) -> Dataset:
    """
    Parse LibSVM text into a Dataset.

    label_values fixes the class mapping (e.g. the training file's) instead of
    deriving it from this stream; num_features fixes p and rejects larger indices.
    """
    task = LossKind(task)
    data: List[float] = []
    columns: List[int] = []
    indptr: List[int] = [0]
    raw_labels: List[float] = []
    max_index = 0
    for line_no, raw in enumerate(stream, start=1):
        text = raw.split("#", 1)[0]
        tokens = list(_TOKEN.finditer(text))
        if not tokens:
            continue
        label_tok = tokens[0]
        raw_labels.append(_parse_float(label_tok.group(), "label", line_no, label_tok.start() + 1))
        last = 0
        for tok in tokens[1:]:
            column = tok.start() + 1
            idx_text, sep, val_text = tok.group().partition(":")
            if not sep:
                raise DataError(f"expected <index>:<value>, got {tok.group()!r}", line_no, column)
            if not _INDEX.fullmatch(idx_text) or int(idx_text) < 1:
                raise DataError(f"malformed index {idx_text!r}", line_no, column)
            index = int(idx_text)
            if index <= last:
                raise DataError("non-increasing index", line_no, column)
            if num_features is not None and index > num_features:
                raise DataError(
                    f"index {index} exceeds feature count {num_features}", line_no, column
                )
            columns.append(index - 1)
            data.append(_parse_float(val_text, "value", line_no, column + len(idx_text) + 1))
            last = index
        max_index = max(max_index, last)
        indptr.append(len(data))

    if not raw_labels:
        raise DataError("no examples found")

    p = num_features if num_features is not None else max_index
    matrix = sparse.csr_matrix(
        (
            np.asarray(data, dtype=float),
            np.asarray(columns, dtype=np.int32),
            np.asarray(indptr, dtype=np.int64),
        ),
        shape=(len(raw_labels), p),
    )
    if task == LossKind.SQUARED:
        targets = np.asarray(raw_labels, dtype=float).reshape(-1, 1)
        mapping: Tuple[float, ...] = ()
    else:
        mapping = tuple(label_values) if label_values is not None else tuple(sorted(set(raw_labels)))
        lookup = {value: cls for cls, value in enumerate(mapping, start=1)}
        try:
            targets = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
        except KeyError as exc:
            line = _line_of_example(stream, raw_labels.index(exc.args[0]))
            raise DataError(f"label {exc.args[0]!r} not in the class mapping", line) from None
    logger.info(
        "Parsed %d examples, %d features, %s",
        len(raw_labels),
        p,
        f"{len(mapping)} classes {mapping}" if task == LossKind.LOG else "regression targets",
    )
    return Dataset(matrix, targets, p, task, mapping)


def _line_of_example(stream: TextIO, example: int) -> Optional[int]:
    """1-based line number of the example-th data line, if the stream can rewind."""
    try:
        stream.seek(0)
    except (AttributeError, OSError, io.UnsupportedOperation):
        return None
    seen = -1
    for line_no, raw in enumerate(stream, start=1):
        if raw.split("#", 1)[0].strip():
            seen += 1
            if seen == example:
                return line_no
    return None


def write_libsvm(dataset: Dataset, stream: TextIO) -> None:
    m = dataset.matrix
    for i in range(len(dataset)):
        if dataset.task == LossKind.LOG:
            label = dataset.label_values[int(dataset.targets[i]) - 1]
        else:
            label = float(dataset.targets[i, 0])
        fields = [format(label, ".17g")]
        lo, hi = m.indptr[i], m.indptr[i + 1]
        fields.extend(
            f"{j + 1}:{format(v, '.17g')}" for j, v in zip(m.indices[lo:hi], m.data[lo:hi])
        )
        stream.write(" ".join(fields) + "\n")


def load_libsvm(
    path: Union[str, Path],
    task: Union[LossKind, str] = LossKind.LOG,
    label_values: Optional[Sequence[float]] = None,
    num_features: Optional[int] = None,
) -> Dataset:
    logger.info("Loading %s", path)
    with Path(path).open("r", encoding="utf-8") as f:
        return parse_libsvm(f, task, label_values, num_features)


def file_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------- augmentation and splits --------------------


def augment(dataset: Dataset) -> Dataset:
    """Append the constant -1 feature p+1 to every example."""
    if dataset.augmented:
        raise DimensionError("dataset is already augmented")
    bias = sparse.csr_matrix(np.full((len(dataset), 1), -1.0))
    matrix = _canonical(sparse.hstack([dataset.matrix, bias], format="csr"))
    return Dataset(
        matrix, dataset.targets, dataset.num_features, dataset.task, dataset.label_values, True
    )


def split_dataset(
    dataset: Dataset, fractions: Sequence[float], seed: int
) -> Tuple[Dataset, ...]:
    """Seeded shuffle, then contiguous parts of floor(n*f); the last part takes the rest."""
    if not fractions or any(f <= 0 for f in fractions):
        raise ConfigError(f"split fractions must be positive, got {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    # 1e-9 absorbs binary rounding such as 0.29 * 100 == 28.999999999999996
    sizes = [math.floor(n * f + 1e-9) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    parts = []
    start = 0
    for size in sizes:
        parts.append(dataset.subset(order[start : start + size]))
        start += size
    return tuple(parts)


# -------------------- synthetic datasets --------------------


def make_rotated_xor(
    n: int, noise: float = 0.0, seed: int = 0, angle_deg: float = 30.0
) -> Dataset:
    """
    Balanced 2-D XOR of two rotated half-planes.

    Class 1 where both rotated coordinates share a sign, class 2 otherwise;
    a `noise` fraction of labels is flipped afterwards.
    """
    if n < 4:
        raise ConfigError(f"rotated XOR needs n >= 4, got {n}")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError(f"noise must lie in [0, 1], got {noise}")
    rng = np.random.default_rng(seed)
    angle = math.radians(angle_deg)
    rotation = np.array(
        [[math.cos(angle), math.sin(angle)], [-math.sin(angle), math.cos(angle)]]
    )
    want = {1: n // 2, 2: n - n // 2}
    points: dict = {1: [], 2: []}
    while any(len(points[c]) < want[c] for c in want):
        batch = rng.uniform(-1.0, 1.0, size=(2 * n, 2))
        uv = batch @ rotation.T
        labels = np.where((uv[:, 0] >= 0) == (uv[:, 1] >= 0), 1, 2)
        for c in want:
            missing = want[c] - len(points[c])
            if missing > 0:
                points[c].extend(batch[labels == c][:missing])
    X = np.vstack([np.asarray(points[1]), np.asarray(points[2])])
    y = np.concatenate([np.ones(want[1], dtype=np.int64), np.full(want[2], 2, dtype=np.int64)])
    order = rng.permutation(n)
    X, y = X[order], y[order]
    flip = rng.random(n) < noise
    y[flip] = 3 - y[flip]
    return Dataset.from_dense(X, y, LossKind.LOG, (1.0, 2.0))


def make_tree_data(n: int, p: int, k: int, depth: int, seed: int = 0) -> Dataset:
    """Gaussian inputs labelled by a random depth-`depth` oblique tree."""
    if n < 1 or p < 1 or k < 2:
        raise ConfigError(f"need n >= 1, p >= 1, k >= 2, got n={n} p={p} k={k}")
    rng = np.random.default_rng(seed)
    topology = TreeTopology(depth)
    X = rng.standard_normal((n, p))
    W = rng.standard_normal((topology.internal_count, p + 1))
    leaves = route(W, np.hstack([X, -np.ones((n, 1))]), topology)
    leaf_labels = rng.integers(1, k + 1, size=topology.leaf_count)
    y = leaf_labels[leaves - 1]
    return Dataset.from_dense(X, y, LossKind.LOG, tuple(float(c) for c in range(1, k + 1)))
