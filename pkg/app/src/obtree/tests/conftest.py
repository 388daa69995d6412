# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0
import math
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
import pytest

from obtree.data_io import Dataset, augment, make_rotated_xor, write_libsvm
from obtree.losses import LossKind
from obtree.tree_core import TreeModel, TreeTopology

XOR_ANGLE = math.radians(30.0)


# ---------- Random instances ----------


def random_model(
    rng: np.random.Generator,
    depth: int,
    features: int,
    classes: int,
    task: LossKind = LossKind.LOG,
    w_scale: float = 1.0,
    theta_scale: float = 2.0,
) -> TreeModel:
    topology = TreeTopology(depth)
    W = w_scale * rng.standard_normal((topology.internal_count, features))
    theta = theta_scale * rng.standard_normal((topology.leaf_count, classes))
    return TreeModel(topology, W, theta, task)


def random_target(
    rng: np.random.Generator, classes: int, task: LossKind
) -> Union[int, np.ndarray]:
    if task == LossKind.LOG:
        return int(rng.integers(1, classes + 1))
    return 2.0 * rng.standard_normal(classes)


def random_instance(
    rng: np.random.Generator, depth: Optional[int] = None
) -> Tuple[TreeModel, np.ndarray, Union[int, np.ndarray]]:
    """Model, input and target with d in {1,2,3}, p~ in {2,5}, k in {2,4} and either loss."""
    d = int(rng.choice([1, 2, 3])) if depth is None else depth
    p = int(rng.choice([2, 5]))
    k = int(rng.choice([2, 4]))
    task = LossKind.LOG if rng.random() < 0.5 else LossKind.SQUARED
    model = random_model(rng, d, p, k, task)
    x = rng.standard_normal(p)
    return model, x, random_target(rng, k, task)


def random_dataset(
    rng: np.random.Generator, n: int, p: int, classes: int, task: LossKind = LossKind.LOG
) -> Dataset:
    """Augmented dense Gaussian dataset; every class label appears at least once."""
    X = rng.standard_normal((n, p))
    if task == LossKind.LOG:
        y = np.concatenate([np.arange(1, classes + 1), rng.integers(1, classes + 1, n - classes)])
        labels = tuple(float(c) for c in range(1, classes + 1))
        return augment(Dataset.from_dense(X, y, task, labels))
    return augment(Dataset.from_dense(X, rng.standard_normal((n, classes)), task))


# ---------- Rotated XOR ----------


def xor_tree(nu: float = 1.0) -> TreeModel:
    """Depth-2 oblique tree that separates the 30-degree rotated XOR exactly."""
    c, s = math.cos(XOR_ANGLE), math.sin(XOR_ANGLE)
    scale = math.sqrt(nu)
    W = scale * np.array([[c, s, 0.0], [-s, c, 0.0], [-s, c, 0.0]])
    # leaves 1 and 4 hold class 1 (u and v share a sign)
    theta = np.array([[1.0, -1.0], [-1.0, 1.0], [-1.0, 1.0], [1.0, -1.0]])
    return TreeModel(TreeTopology(2), W, theta, LossKind.LOG)


def xor_points(n_per_quadrant: int = 1) -> Dataset:
    """Points placed in the middle of each of the four rotated quadrants."""
    c, s = math.cos(XOR_ANGLE), math.sin(XOR_ANGLE)
    points, labels = [], []
    for su, sv in ((-1, -1), (-1, 1), (1, -1), (1, 1)):
        for r in np.linspace(0.3, 0.9, n_per_quadrant):
            u, v = su * r, sv * r
            points.append([c * u - s * v, s * u + c * v])
            labels.append(1 if su == sv else 2)
    return augment(Dataset.from_dense(np.array(points), np.array(labels), LossKind.LOG, (1.0, 2.0)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def xor_data() -> Dataset:
    return augment(make_rotated_xor(400, noise=0.0, seed=3))


# ---------- Files ----------


def write_dataset(path: Path, dataset: Dataset) -> Path:
    with path.open("w", encoding="utf-8", newline="\n") as f:
        write_libsvm(dataset, f)
    return path


@pytest.fixture
def xor_files(tmp_path: Path) -> Iterator[Tuple[Path, Path]]:
    """Train/test LibSVM files of a small noisy rotated XOR."""
    data = make_rotated_xor(240, noise=0.05, seed=11)
    order = np.arange(len(data))
    train = write_dataset(tmp_path / "train.svm", data.subset(order[:180]))
    test = write_dataset(tmp_path / "test.svm", data.subset(order[180:]))
    yield train, test
