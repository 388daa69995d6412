# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""Training pipeline and the experiments behind the command-line driver."""

from __future__ import annotations

import asyncio
import logging
import timeit
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from obtree.config import Algorithm, GreedyConfig, Inference, OptimizerConfig
from obtree.data_io import Dataset
from obtree.exceptions import ConfigError
from obtree.greedy_init import build_axis_aligned, build_random_oblique, co2_refine
from obtree.inference import BoundMode, accuracy, empirical_loss, surrogate_loss
from obtree.optimizer import MomentumState, TrainResult, active_leaves, run_epoch, train
from obtree.tree_core import TreeModel

logger = logging.getLogger(__name__)

T = TypeVar("T")


class InitMethod(str, Enum):
    AXIS = "axis"
    CO2 = "co2"
    RANDOM = "random"


DEPTH_SWEEP_METHODS = ("axis", "random", "co2", "nongreedy-sgd", "nongreedy-ssgd")


# -------------------- pipeline --------------------


def initial_model(
    dataset: Dataset,
    depth: int,
    init: InitMethod,
    config: OptimizerConfig,
    greedy: GreedyConfig,
) -> TreeModel:
    """Greedy starting point for non-greedy training."""
    init = InitMethod(init)
    if init == InitMethod.RANDOM:
        return build_random_oblique(
            dataset, depth, greedy.trials_per_node, config.seed, config.nu, greedy
        )
    model = build_axis_aligned(dataset, depth, config.nu, greedy)
    if init == InitMethod.CO2:
        model = co2_refine(model, dataset, config, greedy)
    return model


def fit(
    dataset: Dataset,
    depth: int,
    config: OptimizerConfig,
    epochs: int,
    init: InitMethod = InitMethod.CO2,
    greedy: Optional[GreedyConfig] = None,
    validation: Optional[Dataset] = None,
) -> TrainResult:
    """Greedy init followed by `epochs` epochs of SGD or SSGD."""
    greedy = greedy or GreedyConfig()
    start = initial_model(dataset, depth, init, config, greedy)
    config = replace(config, tau=config.steps_for_epochs(len(dataset), epochs))
    return train(dataset, config, start, validation)


def evaluate(
    model: TreeModel, dataset: Dataset, inference: Inference = Inference.FAST
) -> Dict[str, Any]:
    return {
        "n": len(dataset),
        "accuracy": accuracy(model, dataset),
        "empirical_loss": empirical_loss(model, dataset),
        "surrogate_loss": surrogate_loss(model, dataset, BoundMode(Inference(inference).value)),
        "active_leaves": active_leaves(model, dataset),
    }


def validation_error(model: TreeModel, dataset: Dataset) -> float:
    """1 - accuracy for classification, mean loss for regression."""
    acc = accuracy(model, dataset)
    if acc is not None:
        return 1.0 - acc
    return empirical_loss(model, dataset) / len(dataset)


# -------------------- concurrent grid runner --------------------


async def run_grid(
    points: Sequence[Any], job: Callable[[Any], T], workers: int = 1
) -> List[T]:
    """Run job(point) for every grid point in worker threads; results come back in grid order."""
    if workers < 1:
        raise ConfigError(f"workers must be positive, got {workers}")
    semaphore = asyncio.Semaphore(workers)

    async def one(point: Any) -> T:
        async with semaphore:
            return await asyncio.to_thread(job, point)

    tasks: List[Awaitable[T]] = [one(p) for p in points]
    return list(await asyncio.gather(*tasks))


# -------------------- hyperparameter sweep --------------------


@dataclass
class GridPoint:
    nu: float
    eta: float
    validation_error: float
    train_accuracy: Optional[float]
    val_accuracy: Optional[float]

    def as_record(self) -> dict:
        return {"record": "grid", **asdict(self)}


@dataclass
class SweepResult:
    grid: List[GridPoint]
    best: GridPoint
    model: TreeModel
    test: Optional[Dict[str, Any]]

    def as_records(self) -> List[dict]:
        records = [p.as_record() for p in self.grid]
        records.append({"record": "best", **asdict(self.best)})
        if self.test is not None:
            records.append({"record": "test", **self.test})
        return records


def sweep(
    train_set: Dataset,
    validation: Dataset,
    depth: int,
    config: OptimizerConfig,
    epochs: int,
    nu_grid: Sequence[float],
    lr_grid: Sequence[float],
    init: InitMethod = InitMethod.CO2,
    greedy: Optional[GreedyConfig] = None,
    test: Optional[Dataset] = None,
    workers: int = 1,
) -> SweepResult:
    """
    Pick (nu, eta) by validation error, then retrain on train + validation.

    Ties go to the smaller nu, then the smaller eta.
    """
    if not nu_grid or not lr_grid:
        raise ConfigError("sweep needs a non-empty nu grid and learning-rate grid")
    points = [(float(nu), float(eta)) for nu in nu_grid for eta in lr_grid]
    logger.info("Sweeping %d grid points at depth %d with %d workers", len(points), depth, workers)

    def job(point: Tuple[float, float]) -> GridPoint:
        nu, eta = point
        result = fit(train_set, depth, replace(config, nu=nu, eta=eta), epochs, init, greedy)
        return GridPoint(
            nu,
            eta,
            validation_error(result.model, validation),
            accuracy(result.model, train_set),
            accuracy(result.model, validation),
        )

    grid = asyncio.run(run_grid(points, job, workers))
    best = min(grid, key=lambda p: (p.validation_error, p.nu, p.eta))
    logger.info(
        "Best grid point nu=%g eta=%g (validation error %.4f)", best.nu, best.eta, best.validation_error
    )
    union = train_set.concat(validation)
    final = fit(union, depth, replace(config, nu=best.nu, eta=best.eta), epochs, init, greedy)
    test_metrics = None if test is None else evaluate(final.model, test, config.inference)
    return SweepResult(grid, best, final.model, test_metrics)


# -------------------- depth sweep --------------------


@dataclass
class DepthRow:
    depth: int
    method: str
    train_accuracy: Optional[float]
    test_accuracy: Optional[float]
    active_leaves: int

    def as_record(self) -> dict:
        return {"record": "depth", **asdict(self)}


def depth_sweep(
    train_set: Dataset,
    test: Dataset,
    depths: Sequence[int],
    config: OptimizerConfig,
    epochs: int,
    greedy: Optional[GreedyConfig] = None,
    methods: Sequence[str] = DEPTH_SWEEP_METHODS,
    validation: Optional[Dataset] = None,
    nu_grid: Sequence[float] = (),
    lr_grid: Sequence[float] = (),
    workers: int = 1,
) -> List[DepthRow]:
    """
    Train and test accuracy per (depth, method).

    With a validation set and grids, the non-greedy methods are tuned per
    depth by `sweep`; otherwise they train once with `config`.
    """
    greedy = greedy or GreedyConfig()
    unknown = set(methods) - set(DEPTH_SWEEP_METHODS)
    if unknown:
        raise ConfigError(f"unknown depth-sweep methods {sorted(unknown)}")
    tune = validation is not None and bool(nu_grid) and bool(lr_grid)
    rows = []
    for depth in depths:
        for method in methods:
            fitted_on = train_set
            if method == "axis":
                model = build_axis_aligned(train_set, depth, config.nu, greedy)
            elif method == "random":
                model = build_random_oblique(
                    train_set, depth, greedy.trials_per_node, config.seed, config.nu, greedy
                )
            elif method == "co2":
                model = initial_model(train_set, depth, InitMethod.CO2, config, greedy)
            else:
                algo = Algorithm.SGD if method == "nongreedy-sgd" else Algorithm.SSGD
                method_config = replace(config, algorithm=algo)
                if tune:
                    assert validation is not None
                    result = sweep(
                        train_set, validation, depth, method_config, epochs,
                        nu_grid, lr_grid, InitMethod.CO2, greedy, workers=workers,
                    )
                    model = result.model
                    fitted_on = train_set.concat(validation)
                else:
                    model = fit(train_set, depth, method_config, epochs, InitMethod.CO2, greedy).model
            row = DepthRow(
                depth,
                method,
                accuracy(model, fitted_on),
                accuracy(model, test),
                active_leaves(model, fitted_on),
            )
            logger.info("depth %d %s: train=%s test=%s", depth, method, row.train_accuracy, row.test_accuracy)
            rows.append(row)
    return rows


# -------------------- timing --------------------


@dataclass
class TimingRow:
    depth: int
    inference: str
    median_ms: float
    reps: int

    def as_record(self) -> dict:
        return {"record": "timing", **asdict(self)}


def random_model(dataset: Dataset, depth: int, nu: float, seed: int) -> TreeModel:
    """Split rows drawn uniformly on the sphere of radius sqrt(nu); zero theta."""
    rng = np.random.default_rng(seed)
    model = TreeModel.zeros(depth, dataset.width, dataset.num_classes, dataset.task)
    W = rng.standard_normal(model.W.shape)
    model.W = W * (np.sqrt(nu) / np.linalg.norm(W, axis=1))[:, None]
    return model


def time_epoch(model: TreeModel, dataset: Dataset, config: OptimizerConfig) -> float:
    """Wall time in ms of one SGD epoch from `model` (which is left untouched)."""
    work = model.copy()
    rng = np.random.default_rng(config.seed)
    state = MomentumState.zeros_like(work)
    steps = config.steps_for_epochs(len(dataset), 1)
    started = timeit.default_timer()
    run_epoch(work, dataset, config, state, rng, steps)
    return (timeit.default_timer() - started) * 1e3


def timing(
    dataset: Dataset,
    depths: Sequence[int],
    reps: int,
    config: OptimizerConfig,
) -> List[TimingRow]:
    """Median per-epoch time with exact and with fast inference, per depth."""
    if reps < 1:
        raise ConfigError(f"reps must be positive, got {reps}")
    rows = []
    for depth in depths:
        start = random_model(dataset, depth, config.nu, config.seed)
        for mode in (Inference.EXACT, Inference.FAST):
            mode_config = replace(config, inference=mode, algorithm=Algorithm.SGD)
            times = [time_epoch(start, dataset, mode_config) for _ in range(reps)]
            row = TimingRow(depth, mode.value, float(np.median(times)), reps)
            logger.info("depth %d %s: %.1f ms per epoch", depth, mode.value, row.median_ms)
            rows.append(row)
    return rows


def timing_ratios(rows: Sequence[TimingRow]) -> Dict[int, float]:
    """exact/fast median time per depth."""
    by_key = {(r.depth, r.inference): r.median_ms for r in rows}
    depths = sorted({r.depth for r in rows})
    return {
        d: by_key[(d, "exact")] / max(by_key[(d, "fast")], 1e-9)
        for d in depths
        if (d, "exact") in by_key and (d, "fast") in by_key
    }


# -------------------- effect of nu --------------------


@dataclass
class NuEffectRow:
    nu: float
    active_leaves: float
    train_accuracy: Optional[float]
    test_accuracy: Optional[float]
    seeds: int

    def as_record(self) -> dict:
        return {"record": "nu_effect", **asdict(self)}


def _median(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


def nu_effect(
    train_set: Dataset,
    test: Optional[Dataset],
    depth: int,
    nu_grid: Sequence[float],
    config: OptimizerConfig,
    epochs: int,
    seeds: int = 5,
    init: InitMethod = InitMethod.AXIS,
    greedy: Optional[GreedyConfig] = None,
    workers: int = 1,
) -> List[NuEffectRow]:
    """Active leaves and accuracy after training, median over seeds 0..seeds-1, per nu."""
    if seeds < 1:
        raise ConfigError(f"seeds must be positive, got {seeds}")
    if not nu_grid:
        raise ConfigError("nu-effect needs a non-empty nu grid")
    points = [(float(nu), seed) for nu in nu_grid for seed in range(seeds)]

    def job(point: Tuple[float, int]) -> Tuple[int, Optional[float], Optional[float]]:
        nu, seed = point
        model = fit(train_set, depth, replace(config, nu=nu, seed=seed), epochs, init, greedy).model
        return (
            active_leaves(model, train_set),
            accuracy(model, train_set),
            None if test is None else accuracy(model, test),
        )

    results = asyncio.run(run_grid(points, job, workers))
    rows = []
    for i, nu in enumerate(nu_grid):
        chunk = results[i * seeds : (i + 1) * seeds]
        row = NuEffectRow(
            float(nu),
            float(np.median([c[0] for c in chunk])),
            _median([c[1] for c in chunk]),
            _median([c[2] for c in chunk]),
            seeds,
        )
        logger.info("nu=%g: median active leaves %.1f", row.nu, row.active_leaves)
        rows.append(row)
    return rows


__all__ = [
    "DEPTH_SWEEP_METHODS",
    "DepthRow",
    "GridPoint",
    "InitMethod",
    "NuEffectRow",
    "SweepResult",
    "TimingRow",
    "depth_sweep",
    "evaluate",
    "fit",
    "initial_model",
    "nu_effect",
    "random_model",
    "run_grid",
    "sweep",
    "time_epoch",
    "timing",
    "timing_ratios",
    "validation_error",
]
