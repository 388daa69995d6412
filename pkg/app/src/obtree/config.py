# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Tuple

from obtree.exceptions import ConfigError

logger = logging.getLogger(__name__)

# -------- Defaults file (env override for its location) --------

DEFAULTS_FILE = os.getenv(
    "OBTREE_DEFAULTS_FILE", str(Path(__file__).parent / "config" / "defaults.json")
)

_BUILTIN_DEFAULTS: Dict[str, Any] = {
    "nu": 4.0,
    "lr": 0.1,
    "epochs": 20,
    "batch_size": 32,
    "momentum": 0.9,
    "ssgd_inner_steps": 200,
    "ssgd_rel_improvement": 1e-3,
    "co2_steps": 200,
    "trials_per_node": 20,
    "min_samples_split": 2,
    "nu_grid": [0.1, 1, 4, 10, 43, 100],
    "lr_grid": [0.01, 0.1],
    "test_split": [0.8, 0.2],
    "validation_split": [0.64, 0.16, 0.2],
    "sweep_depths": [2, 4, 6, 8],
    "timing_depths": [6, 8, 10, 12, 14],
    "timing_reps": 5,
}


def _load_defaults_from_file(path: Path) -> Dict[str, Any]:
    defaults = dict(_BUILTIN_DEFAULTS)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)
        if isinstance(data, dict):
            defaults.update({k: v for k, v in data.items() if k in defaults})
        else:
            logger.warning("Ignoring %s: top level is not an object", path)
    except FileNotFoundError:
        logger.debug("No defaults file at %s, using built-in values", path)
    except Exception as exc:
        logger.warning("Failed to read %s: %s", path, exc)
    return defaults


DEFAULTS = _load_defaults_from_file(Path(DEFAULTS_FILE))

# -------- Scalar defaults (env with file fallback) --------

NU = float(os.getenv("OBTREE_NU", str(DEFAULTS["nu"])))
LR = float(os.getenv("OBTREE_LR", str(DEFAULTS["lr"])))
EPOCHS = int(os.getenv("OBTREE_EPOCHS", str(DEFAULTS["epochs"])))
BATCH_SIZE = int(os.getenv("OBTREE_BATCH", str(DEFAULTS["batch_size"])))
MOMENTUM = float(os.getenv("OBTREE_MOMENTUM", str(DEFAULTS["momentum"])))
SSGD_INNER_STEPS = int(
    os.getenv("OBTREE_SSGD_INNER_STEPS", str(DEFAULTS["ssgd_inner_steps"]))
)
SSGD_REL_IMPROVEMENT = float(
    os.getenv("OBTREE_SSGD_REL_IMPROVEMENT", str(DEFAULTS["ssgd_rel_improvement"]))
)
CO2_STEPS = int(os.getenv("OBTREE_CO2_STEPS", str(DEFAULTS["co2_steps"])))
LOG_LEVEL = os.getenv("OBTREE_LOG_LEVEL", "INFO")

NU_GRID: Tuple[float, ...] = tuple(float(v) for v in DEFAULTS["nu_grid"])
LR_GRID: Tuple[float, ...] = tuple(float(v) for v in DEFAULTS["lr_grid"])
TEST_SPLIT: Tuple[float, ...] = tuple(float(v) for v in DEFAULTS["test_split"])
VALIDATION_SPLIT: Tuple[float, ...] = tuple(
    float(v) for v in DEFAULTS["validation_split"]
)
SWEEP_DEPTHS: Tuple[int, ...] = tuple(int(v) for v in DEFAULTS["sweep_depths"])
TIMING_DEPTHS: Tuple[int, ...] = tuple(int(v) for v in DEFAULTS["timing_depths"])
TIMING_REPS = int(DEFAULTS["timing_reps"])


class Algorithm(str, Enum):
    SGD = "sgd"
    SSGD = "ssgd"


class Inference(str, Enum):
    EXACT = "exact"
    FAST = "fast"


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Settings of one non-greedy training run.

    nu bounds the squared norm of every split row, eta is the step size and
    tau the total number of gradient steps.
    """

    nu: float = NU
    eta: float = LR
    tau: int = 0
    batch_size: int = BATCH_SIZE
    momentum: float = MOMENTUM
    algorithm: Algorithm = Algorithm.SGD
    inference: Inference = Inference.FAST
    ssgd_inner_steps: int = SSGD_INNER_STEPS
    ssgd_rel_improvement: float = SSGD_REL_IMPROVEMENT
    seed: int = 0

    def __post_init__(self) -> None:
        # accept plain strings from CLI flags and JSON records
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "inference", Inference(self.inference))
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ConfigError(f"nu must be positive and finite, got {self.nu}")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be positive and finite, got {self.eta}")
        if self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.ssgd_inner_steps < 1:
            raise ConfigError(
                f"ssgd_inner_steps must be positive, got {self.ssgd_inner_steps}"
            )
        if self.ssgd_rel_improvement < 0:
            raise ConfigError(
                "ssgd_rel_improvement must be non-negative, "
                f"got {self.ssgd_rel_improvement}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def steps_for_epochs(self, n: int, epochs: int) -> int:
        return epochs * math.ceil(n / self.batch_size)

    def as_record(self) -> Dict[str, Any]:
        return {
            "nu": self.nu,
            "eta": self.eta,
            "tau": self.tau,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "algorithm": self.algorithm.value,
            "inference": self.inference.value,
            "ssgd_inner_steps": self.ssgd_inner_steps,
            "ssgd_rel_improvement": self.ssgd_rel_improvement,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class GreedyConfig:
    """Stopping rules and budgets of the greedy builders."""

    min_samples_split: int = int(DEFAULTS["min_samples_split"])
    trials_per_node: int = int(DEFAULTS["trials_per_node"])
    co2_steps: int = CO2_STEPS

    def __post_init__(self) -> None:
        if self.min_samples_split < 2:
            raise ConfigError(
                f"min_samples_split must be at least 2, got {self.min_samples_split}"
            )
        if self.trials_per_node < 1:
            raise ConfigError(
                f"trials_per_node must be positive, got {self.trials_per_node}"
            )
        if self.co2_steps < 0:
            raise ConfigError(f"co2_steps must be non-negative, got {self.co2_steps}")
