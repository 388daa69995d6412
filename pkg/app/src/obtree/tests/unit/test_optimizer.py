# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0
import math

import numpy as np
import pytest

from obtree.config import Algorithm, GreedyConfig, Inference, OptimizerConfig
from obtree.data_io import Dataset, augment
from obtree.exceptions import ConfigError, DataError, DimensionError, NumericError
from obtree.experiments import InitMethod, fit
from obtree.inference import BoundMode, accuracy, search, surrogate_loss
from obtree.losses import LossKind
from obtree.optimizer import (
    Batch,
    MomentumState,
    active_leaves,
    project_row,
    sgd_step,
    surrogate_gradient,
    train_sgd,
    train_ssgd,
)
from obtree.tests.conftest import random_dataset, random_model, xor_points, xor_tree
from obtree.tree_core import TreeModel, TreeTopology, route


def _config(**overrides):
    base = dict(nu=10.0, eta=0.1, batch_size=1, momentum=0.0, seed=0)
    base.update(overrides)
    return OptimizerConfig(**base)


# ---------- projection ----------


def test_projection_norm(rng):
    for _ in range(1000):
        w = 3.0 * rng.standard_normal(int(rng.integers(1, 8)))
        nu = float(rng.uniform(0.1, 10.0))
        projected = project_row(w, nu)
        assert abs(projected @ projected - min(w @ w, nu)) <= 1e-12 * max(1.0, nu)


def test_projection_keeps_feasible_rows():
    w = np.array([0.3, 0.4])
    assert project_row(w, 1.0) is w


def test_projection_rejects_non_positive_nu():
    with pytest.raises(ConfigError):
        project_row(np.ones(2), 0.0)


# ---------- single steps ----------


def test_step_moves_only_the_selected_leaf():
    # s = 5: flipping costs 10 and the other leaf is worse, so g_hat == h_hat
    model = TreeModel(TreeTopology(1), np.array([[5.0, 0.0]]), np.array([[0.0], [1.0]]), LossKind.SQUARED)
    batch = Batch(np.array([[1.0, -1.0]]), np.array([[3.0]]))
    sgd_step(model, batch, _config(), MomentumState.zeros_like(model))
    np.testing.assert_array_equal(model.W, [[5.0, 0.0]])
    assert model.theta[1, 0] == pytest.approx(1.0 + 0.1 * 2 * 2.0)
    assert model.theta[0, 0] == 0.0


def test_step_updates_the_flipped_row_by_hand():
    # s = 0.1: flipping to leaf 1 costs 0.2 but gains loss 9
    model = TreeModel(TreeTopology(1), np.array([[0.1, 0.0]]), np.array([[3.0], [0.0]]), LossKind.SQUARED)
    x = np.array([1.0, -1.0])
    batch = Batch(x[None, :], np.array([[0.0]]))
    sgd_step(model, batch, _config(), MomentumState.zeros_like(model))
    # W-gradient is (g_hat - h_hat) x = (-1 - 1) x = [-2, 2]
    np.testing.assert_allclose(model.W, [[0.1 + 0.1 * 2.0, -0.1 * 2.0]])
    assert model.theta[0, 0] == pytest.approx(3.0 - 0.1 * 6.0)
    assert model.theta[1, 0] == 0.0


def test_no_flip_means_no_w_change_even_with_momentum(rng):
    model = xor_tree(nu=25.0)
    data = xor_points()
    state = MomentumState.zeros_like(model)
    before = model.W.copy()
    sgd_step(model, Batch(data.X, data.targets), _config(nu=25.0, momentum=0.9), state)
    np.testing.assert_array_equal(model.W, before)


def test_gradient_sparsity(rng):
    data = random_dataset(rng, 40, 4, 3)
    for depth in (2, 3, 4):
        model = random_model(rng, depth, data.width, 3)
        assignments = rng.integers(1, model.topology.leaf_count + 1, size=len(data))
        for i in range(len(data)):
            x, y = data.X[i : i + 1], data.targets[i : i + 1]
            grad = surrogate_gradient(model, Batch(x, y), _config())
            assert len(grad.W_rows) <= depth
            grad = surrogate_gradient(model, Batch(x, y, assignments[i : i + 1]), _config())
            assert len(grad.W_rows) <= 2 * depth


def test_fresh_assignment_gradient_equals_fast_sgd_gradient(rng):
    data = random_dataset(rng, 25, 3, 2)
    model = random_model(rng, 3, data.width, 2)
    config = _config(inference=Inference.FAST)
    assignments = route(model.W, data.X, model.topology)
    plain = surrogate_gradient(model, Batch(data.X, data.targets), config)
    fixed = surrogate_gradient(model, Batch(data.X, data.targets, assignments), config)
    np.testing.assert_allclose(plain.dense_W(model.W.shape), fixed.dense_W(model.W.shape), atol=1e-15)
    np.testing.assert_array_equal(plain.theta_rows, fixed.theta_rows)
    np.testing.assert_allclose(plain.theta, fixed.theta)


def _batch_objective(model, batch, inference):
    return np.mean([search(model, x, y, inference).excess for x, y in zip(batch.X, batch.targets)])


def _maximizers(model, batch, inference):
    return [
        (search(model, x, y, inference).leaf, search(model, x, y, inference).flips, tuple(model.W @ x >= 0))
        for x, y in zip(batch.X, batch.targets)
    ]


@pytest.mark.parametrize("inference", [Inference.EXACT, Inference.FAST])
def test_w_subgradient_matches_finite_differences(rng, inference):
    config = _config(inference=inference)
    checked = 0
    step = 1e-7
    while checked < 100:
        data = random_dataset(rng, 4, 3, 2)
        model = random_model(rng, 2, data.width, 2, w_scale=0.5)
        batch = Batch(data.X, data.targets)
        reference = _maximizers(model, batch, inference)
        dense = surrogate_gradient(model, batch, config).dense_W(model.W.shape)
        numeric = np.zeros_like(dense)
        stable = True
        for i in range(model.W.shape[0]):
            for j in range(model.W.shape[1]):
                values = []
                for delta in (step, -step):
                    shifted = model.copy()
                    shifted.W[i, j] += delta
                    if _maximizers(shifted, batch, inference) != reference:
                        stable = False
                    values.append(_batch_objective(shifted, batch, inference))
                numeric[i, j] = (values[0] - values[1]) / (2 * step)
        if not stable:
            continue
        checked += 1
        scale = max(np.linalg.norm(dense), 1.0)
        assert np.linalg.norm(dense - numeric) / scale < 1e-4


def test_theta_gradient_matches_finite_differences(rng):
    config = _config(inference=Inference.EXACT)
    data = random_dataset(rng, 3, 3, 3).subset([0])
    model = random_model(rng, 2, data.width, 3)
    batch = Batch(data.X, data.targets)
    grad = surrogate_gradient(model, batch, config)
    leaf = grad.theta_rows[0]
    step = 1e-6
    for c in range(3):
        values = []
        for delta in (step, -step):
            shifted = model.copy()
            shifted.theta[leaf, c] += delta
            values.append(_batch_objective(shifted, batch, Inference.EXACT))
        numeric = (values[0] - values[1]) / (2 * step)
        assert grad.theta[0, c] == pytest.approx(numeric, abs=1e-5)


def _stepped(model, batch, eta, inference):
    stepped = model.copy()
    sgd_step(stepped, batch, _config(eta=eta, inference=inference), MomentumState.zeros_like(stepped))
    return stepped


@pytest.mark.parametrize("inference", [Inference.EXACT, Inference.FAST])
def test_small_steps_change_the_surrogate_linearly(rng, inference):
    checked = 0
    while checked < 20:
        data = random_dataset(rng, 6, 3, 2)
        model = random_model(rng, 2, data.width, 2, w_scale=0.5)
        batch = Batch(data.X, data.targets)
        grad = surrogate_gradient(model, batch, _config(inference=inference))
        slope = -(np.sum(grad.dense_W(model.W.shape) ** 2) + np.sum(grad.theta**2))
        before = _batch_objective(model, batch, inference)
        reference = _maximizers(model, batch, inference)
        rates = []
        for eta in (1e-6, 1e-7):
            stepped = _stepped(model, batch, eta, inference)
            if _maximizers(stepped, batch, inference) != reference:
                break
            rates.append((_batch_objective(stepped, batch, inference) - before) / eta)
        if len(rates) < 2:
            continue
        checked += 1
        for rate in rates:
            assert rate == pytest.approx(slope, rel=1e-3, abs=1e-6)


@pytest.mark.parametrize("inference", [Inference.EXACT, Inference.FAST])
def test_backtracking_finds_a_non_increasing_step(rng, inference):
    for _ in range(50):
        data = random_dataset(rng, 8, 3, 2)
        model = random_model(rng, 2, data.width, 2, w_scale=0.5)
        batch = Batch(data.X, data.targets)
        before = _batch_objective(model, batch, inference)
        eta = 1.0
        while _batch_objective(_stepped(model, batch, eta, inference), batch, inference) > before + 1e-12:
            eta /= 2.0
            assert eta >= 2.0**-40


def test_non_finite_gradient_is_rejected():
    # the squared-loss gradient 2 (theta - y) overflows
    model = TreeModel(TreeTopology(1), np.array([[1.0, 0.0]]), np.full((2, 1), 1e308), LossKind.SQUARED)
    before = model.copy()
    batch = Batch(np.array([[1.0, -1.0]]), np.array([[-1e308]]))
    with pytest.raises(NumericError):
        sgd_step(model, batch, _config(), MomentumState.zeros_like(model))
    np.testing.assert_array_equal(model.W, before.W)
    np.testing.assert_array_equal(model.theta, before.theta)


def test_empty_batch():
    model = TreeModel.zeros(1, 2, 2)
    with pytest.raises(DataError):
        surrogate_gradient(model, Batch(np.zeros((0, 2)), np.zeros(0, dtype=np.int64)), _config())


# ---------- training loops ----------


def test_tau_zero_returns_the_initial_model(rng):
    data = random_dataset(rng, 20, 2, 2)
    init = random_model(rng, 2, data.width, 2)
    result = train_sgd(data, _config(tau=0), init)
    np.testing.assert_array_equal(result.model.W, init.W)
    np.testing.assert_array_equal(result.model.theta, init.theta)
    assert result.trace == []


def test_training_is_feasible_and_deterministic(rng):
    data = random_dataset(rng, 64, 3, 2)
    init = random_model(rng, 3, data.width, 2, w_scale=3.0)
    config = _config(tau=1000, nu=0.5, eta=1.0, batch_size=4, momentum=0.9, seed=9)
    w0 = init.W.copy()
    first = train_sgd(data, config, init)
    second = train_sgd(data, config, init)
    assert first.model.is_feasible(0.5)
    np.testing.assert_array_equal(first.model.W, second.model.W)
    np.testing.assert_array_equal(first.model.theta, second.model.theta)
    np.testing.assert_array_equal(init.W, w0)
    assert len(first.trace) == math.ceil(1000 / 16)
    assert first.trace[-1].steps == 1000


def test_trace_records(rng):
    data = random_dataset(rng, 30, 2, 2)
    init = random_model(rng, 2, data.width, 2)
    result = train_sgd(data, _config(tau=20, batch_size=10), init)
    assert [m.epoch for m in result.trace] == list(range(1, 8))
    record = result.trace[0].as_record()
    assert list(record)[:8] == [
        "record",
        "epoch",
        "empirical_loss",
        "surrogate_loss",
        "train_accuracy",
        "val_accuracy",
        "active_leaves",
        "wall_ms",
    ]
    assert record["surrogate_loss"] >= record["empirical_loss"] - 1e-9


def test_best_validation_model_is_returned(rng):
    data = random_dataset(rng, 40, 2, 2)
    validation = random_dataset(rng, 20, 2, 2)
    init = random_model(rng, 2, data.width, 2)
    result = train_sgd(data, _config(tau=40, batch_size=4), init, validation)
    best = max(m.val_accuracy for m in result.trace)
    assert accuracy(result.model, validation) == best
    assert result.trace[result.best_epoch - 1].val_accuracy == best


def test_dimension_mismatch(rng):
    raw = Dataset.from_dense(rng.standard_normal((10, 2)), np.arange(10) % 2 + 1, LossKind.LOG, (1.0, 2.0))
    init = TreeModel.zeros(2, 3, 2)
    with pytest.raises(DimensionError):
        train_sgd(raw, _config(tau=5), init)
    with pytest.raises(DimensionError):
        train_sgd(augment(raw), _config(tau=5), TreeModel.zeros(2, 3, 3))


def test_sgd_learns_rotated_xor_from_greedy_starts(xor_data):
    greedy = GreedyConfig()
    best = 0.0
    for init in (InitMethod.CO2, InitMethod.RANDOM):
        for seed in (0, 1):
            for nu in (1.0, 10.0):
                for eta, momentum in ((0.1, 0.9), (0.01, 0.0)):
                    config = _config(nu=nu, eta=eta, batch_size=16, momentum=momentum, seed=seed)
                    model = fit(xor_data, 2, config, 40, init, greedy, xor_data).model
                    assert model.is_feasible(nu)
                    best = max(best, accuracy(model, xor_data))
    assert best >= 0.95


def test_ssgd_bound_dominates_the_fast_bound(rng):
    data = random_dataset(rng, 60, 3, 2)
    init = random_model(rng, 3, data.width, 2)
    config = _config(tau=120, batch_size=8, momentum=0.5, algorithm=Algorithm.SSGD, ssgd_inner_steps=10)
    result = train_ssgd(data, config, init)
    assert result.trace
    phases = [m.phase for m in result.trace]
    assert phases == sorted(phases) and phases[0] == 1
    for metrics in result.trace:
        assert metrics.surrogate_loss >= metrics.fast_surrogate - 1e-9
    assert result.trace[-1].steps == 120


def test_ssgd_first_phase_bound_matches_assignments(rng):
    data = random_dataset(rng, 30, 2, 2)
    init = random_model(rng, 2, data.width, 2)
    assignments = route(init.W, data.X, init.topology)
    assert surrogate_loss(init, data, BoundMode.SSGD, assignments) == surrogate_loss(init, data, BoundMode.FAST)


# ---------- active leaves ----------


def test_active_leaves():
    data = xor_points()
    assert active_leaves(xor_tree(), data) == 4
    assert active_leaves(TreeModel.zeros(3, data.width, 2), data) == 1
    assert active_leaves(xor_tree(), data.subset([0])) == 1
