# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""
Command-line driver.

Metric records are written as JSON lines (to --metrics-out or stdout);
logs go to stderr. Exit codes: 0 success, 1 usage or configuration error,
2 data or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import click
import numpy as np

from obtree import config as defaults
from obtree.config import Algorithm, GreedyConfig, Inference, OptimizerConfig
from obtree.data_io import (
    Dataset,
    augment,
    file_hash,
    load_libsvm,
    make_rotated_xor,
    make_tree_data,
    split_dataset,
)
from obtree.exceptions import (
    ConfigError,
    DataError,
    DimensionError,
    InferenceRefusedError,
    NumericError,
    StructureError,
)
from obtree.experiments import (
    DEPTH_SWEEP_METHODS,
    InitMethod,
    depth_sweep,
    evaluate,
    fit,
    nu_effect,
    sweep,
    timing,
    timing_ratios,
)
from obtree.log import configure_logging, get_tracer
from obtree.losses import LossKind
from obtree.tree_core import TreeModel, load_model, predict_classes, route, save_model

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# -------------------- error handling --------------------


def _exit_code(exc: BaseException) -> Optional[int]:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, DimensionError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, StructureError, InferenceRefusedError)):
        return EXIT_USAGE
    return None


def _handles_errors(command: Callable[..., Any]) -> Callable[..., Any]:
    """Turn package errors into a message on stderr and the matching exit code."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except (NumericError, DataError, DimensionError, OSError, ConfigError,
                StructureError, InferenceRefusedError) as exc:
            code = _exit_code(exc)
            logger.error("%s failed: %s", command.__name__, exc)
            click.echo(f"error: {exc}", err=True)
            click.get_current_context().exit(code if code is not None else EXIT_USAGE)

    return wrapper


# -------------------- records --------------------


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


class RecordSink:
    """Line-delimited JSON records, one per line, keys in insertion order."""

    def __init__(self, path: Optional[str]) -> None:
        self.path = path
        self._stream: Optional[TextIO] = None

    def __enter__(self) -> "RecordSink":
        if self.path is not None:
            self._stream = open(self.path, "w", encoding="utf-8", newline="\n")
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._stream is not None:
            self._stream.close()

    def emit(self, record: Dict[str, Any]) -> None:
        line = json.dumps(record, default=_json_default)
        if self._stream is None:
            click.echo(line)
        else:
            self._stream.write(line + "\n")
            self._stream.flush()


# -------------------- inputs --------------------


def _float_list(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[Tuple[float, ...]]:
    if value is None:
        return None
    try:
        items = tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from None
    if not items:
        raise click.BadParameter("empty list")
    return items


def _int_list(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[Tuple[int, ...]]:
    if value is None:
        return None
    try:
        items = tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None
    if not items or min(items) < 1:
        raise click.BadParameter("expected a non-empty list of positive integers")
    return items


def _csv(values: Iterable[Any]) -> str:
    return ",".join(str(v) for v in values)


class Inputs:
    """Raw (not yet augmented) train/validation/test sets plus their provenance."""

    def __init__(self) -> None:
        self.train: Optional[Dataset] = None
        self.validation: Optional[Dataset] = None
        self.test: Optional[Dataset] = None
        self.files: Dict[str, Dict[str, str]] = {}

    def augmented(self) -> Tuple[Dataset, Optional[Dataset], Optional[Dataset]]:
        assert self.train is not None
        return (
            augment(self.train),
            None if self.validation is None else augment(self.validation),
            None if self.test is None else augment(self.test),
        )

    def hashes(self) -> Dict[str, str]:
        named = {"train": self.train, "val": self.validation, "test": self.test}
        return {k: d.content_hash() for k, d in named.items() if d is not None}


def _load_companion(path: str, train: Dataset) -> Dataset:
    """Validation/test file parsed with the training file's class mapping and width."""
    return load_libsvm(
        path,
        train.task,
        train.label_values if train.task == LossKind.LOG else None,
        train.num_features,
    )


def _load_inputs(params: Dict[str, Any], need_test: bool = False) -> Inputs:
    inputs = Inputs()
    task = LossKind(params.get("task") or LossKind.LOG.value)
    seed = params["seed"]
    if params.get("train"):
        inputs.train = load_libsvm(params["train"], task)
        inputs.files["train"] = {"path": params["train"], "sha256": file_hash(params["train"])}
    elif params.get("synthetic") == "xor":
        inputs.train = make_rotated_xor(params["n"], params["noise"], seed)
    elif params.get("synthetic") == "tree":
        inputs.train = make_tree_data(params["n"], params["p"], params["classes"], 4, seed)
    else:
        raise click.UsageError("either --train or --synthetic is required")
    if inputs.train.task != task:
        raise ConfigError("synthetic datasets are classification only")

    if params.get("test"):
        inputs.test = _load_companion(params["test"], inputs.train)
        inputs.files["test"] = {"path": params["test"], "sha256": file_hash(params["test"])}
    elif need_test:
        inputs.train, inputs.test = split_dataset(inputs.train, defaults.TEST_SPLIT, seed)

    if params.get("val"):
        inputs.validation = _load_companion(params["val"], inputs.train)
        inputs.files["val"] = {"path": params["val"], "sha256": file_hash(params["val"])}
    elif params.get("val_frac") is not None:
        frac = params["val_frac"]
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"--val-frac must lie in (0, 1), got {frac}")
        inputs.train, inputs.validation = split_dataset(inputs.train, (1.0 - frac, frac), seed)
    return inputs


def _optimizer_config(params: Dict[str, Any]) -> OptimizerConfig:
    return OptimizerConfig(
        nu=params["nu"],
        eta=params["lr"],
        batch_size=params["batch"],
        momentum=params["momentum"],
        algorithm=params["algo"],
        inference=params["inference"],
        seed=params["seed"],
    )


def _greedy_config(params: Dict[str, Any]) -> GreedyConfig:
    return GreedyConfig(trials_per_node=params["trials"])


# -------------------- shared options --------------------


def _options(*decorators: Callable[[Any], Any]) -> Callable[[Any], Any]:
    def apply(f: Any) -> Any:
        for decorator in reversed(decorators):
            f = decorator(f)
        return f

    return apply


_data_options = _options(
    click.option("--train", type=click.Path(dir_okay=False), help="Training set (LibSVM)."),
    click.option("--val", type=click.Path(dir_okay=False), help="Validation set (LibSVM)."),
    click.option("--test", type=click.Path(dir_okay=False), help="Test set (LibSVM)."),
    click.option("--val-frac", type=float, default=None, help="Hold out this fraction of --train for validation."),
    click.option("--task", type=click.Choice([k.value for k in LossKind]), default=LossKind.LOG.value, show_default=True),
    click.option("--synthetic", type=click.Choice(["xor", "tree"]), default=None, help="Generate the training set instead of --train."),
    click.option("--n", type=click.IntRange(min=4), default=2000, show_default=True, help="Synthetic set size."),
    click.option("--p", type=click.IntRange(min=1), default=50, show_default=True, help="Synthetic tree-data features."),
    click.option("--classes", type=click.IntRange(min=2), default=2, show_default=True, help="Synthetic tree-data classes."),
    click.option("--noise", type=click.FloatRange(0.0, 1.0), default=0.05, show_default=True, help="Synthetic XOR label noise."),
    click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True),
)

_optimizer_options = _options(
    click.option("--nu", type=float, default=defaults.NU, show_default=True, help="Squared-norm bound of every split row."),
    click.option("--lr", type=float, default=defaults.LR, show_default=True, help="SGD step size."),
    click.option("--epochs", type=click.IntRange(min=0), default=defaults.EPOCHS, show_default=True),
    click.option("--batch", type=click.IntRange(min=1), default=defaults.BATCH_SIZE, show_default=True),
    click.option("--momentum", type=float, default=defaults.MOMENTUM, show_default=True),
    click.option("--algo", type=click.Choice([a.value for a in Algorithm]), default=Algorithm.SGD.value, show_default=True),
    click.option("--inference", type=click.Choice([i.value for i in Inference]), default=Inference.FAST.value, show_default=True),
    click.option("--init", type=click.Choice([i.value for i in InitMethod]), default=InitMethod.CO2.value, show_default=True),
    click.option("--trials", type=click.IntRange(min=1), default=int(defaults.DEFAULTS["trials_per_node"]), show_default=True, help="Random hyperplanes per node for --init random."),
)


# -------------------- commands --------------------


@click.group()
@click.option("--log-level", default=defaults.LOG_LEVEL, show_default=True, help="Root log level.")
def cli(log_level: str) -> None:
    """Non-greedy oblique decision trees."""
    configure_logging(log_level)


@cli.command("train")
@_data_options
@_optimizer_options
@click.option("--depth", type=click.IntRange(min=1), required=True)
@click.option("--model-out", type=click.Path(dir_okay=False), default=None)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def train_cmd(**params: Any) -> None:
    """Greedy init, then non-greedy training; writes the model and metric records."""
    with tracer.start_as_current_span("train"):
        run_train(params)


def run_train(params: Dict[str, Any]) -> TreeModel:
    inputs = _load_inputs(params)
    train_set, validation, test = inputs.augmented()
    config = _optimizer_config(params)
    with RecordSink(params["metrics_out"]) as sink:
        sink.emit(
            {
                "record": "run",
                "command": "train",
                "params": params,
                "config": config.as_record(),
                "files": inputs.files,
                "datasets": inputs.hashes(),
                "label_values": list(train_set.label_values),
            }
        )
        result = fit(
            train_set,
            params["depth"],
            config,
            params["epochs"],
            InitMethod(params["init"]),
            _greedy_config(params),
            validation,
        )
        for metrics in result.trace:
            sink.emit(metrics.as_record())
        model = result.model
        sink.emit({"record": "train", **evaluate(model, train_set, config.inference)})
        if validation is not None:
            sink.emit({"record": "val", **evaluate(model, validation, config.inference)})
        if test is not None:
            sink.emit({"record": "test", **evaluate(model, test, config.inference)})
    if params["model_out"]:
        with open(params["model_out"], "w", encoding="utf-8", newline="\n") as f:
            save_model(model, f)
        logger.info("Model written to %s", params["model_out"])
    return model


def _read_model(path: str) -> TreeModel:
    with open(path, "r", encoding="utf-8") as f:
        return load_model(f)


def _model_data(model: TreeModel, data: str, train: Optional[str]) -> Dataset:
    """Data file parsed against the model's width, with the class mapping of --train if given."""
    label_values = None
    if train is not None and model.task == LossKind.LOG:
        label_values = load_libsvm(train, model.task).label_values
    dataset = load_libsvm(data, model.task, label_values, model.features - 1)
    if dataset.num_classes != model.classes:
        hint = "" if label_values is not None else "; pass --train for the training class mapping"
        raise DimensionError(
            f"{data} maps to {dataset.num_classes} outputs, model has {model.classes}{hint}"
        )
    return augment(dataset)


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--train", type=click.Path(dir_okay=False), default=None, help="Training file whose class mapping to use.")
@click.option("--inference", type=click.Choice([i.value for i in Inference]), default=Inference.FAST.value, show_default=True)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def eval_cmd(model_path: str, data: str, train: Optional[str], inference: str, metrics_out: Optional[str]) -> None:
    """Accuracy, empirical loss, surrogate loss and active leaves of a model on a data file."""
    with tracer.start_as_current_span("eval"):
        model = _read_model(model_path)
        dataset = _model_data(model, data, train)
        with RecordSink(metrics_out) as sink:
            sink.emit({"record": "eval", "data": data, **evaluate(model, dataset, Inference(inference))})


@cli.command("predict")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--train", type=click.Path(dir_okay=False), default=None, help="Training file whose class mapping to use.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def predict_cmd(model_path: str, data: str, train: Optional[str], out: Optional[str]) -> None:
    """One predicted raw label (or regression value) per example."""
    with tracer.start_as_current_span("predict"):
        model = _read_model(model_path)
        dataset = _model_data(model, data, train)
        if model.task == LossKind.LOG:
            classes = predict_classes(model, dataset.X)
            lines = [format(dataset.label_values[c - 1], ".17g") for c in classes]
        else:
            leaves = route(model.W, dataset.X, model.topology)
            lines = [" ".join(format(v, ".17g") for v in model.theta[j - 1]) for j in leaves]
        text = "\n".join(lines) + "\n"
        if out is None:
            click.echo(text, nl=False)
        else:
            Path(out).write_text(text, encoding="utf-8")


@cli.command("sweep")
@_data_options
@_optimizer_options
@click.option("--depth", type=click.IntRange(min=1), required=True)
@click.option("--nu-grid", callback=_float_list, default=_csv(defaults.NU_GRID), show_default=True)
@click.option("--lr-grid", callback=_float_list, default=_csv(defaults.LR_GRID), show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--model-out", type=click.Path(dir_okay=False), default=None)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def sweep_cmd(**params: Any) -> None:
    """Grid search over (nu, lr) by validation error, then retrain on train + validation."""
    with tracer.start_as_current_span("sweep"):
        inputs = _load_inputs(params)
        if inputs.validation is None:
            raise click.UsageError("sweep needs --val or --val-frac")
        train_set, validation, test = inputs.augmented()
        assert validation is not None
        config = _optimizer_config(params)
        result = sweep(
            train_set,
            validation,
            params["depth"],
            config,
            params["epochs"],
            params["nu_grid"],
            params["lr_grid"],
            InitMethod(params["init"]),
            _greedy_config(params),
            test,
            params["workers"],
        )
        with RecordSink(params["metrics_out"]) as sink:
            sink.emit(
                {
                    "record": "run",
                    "command": "sweep",
                    "params": params,
                    "files": inputs.files,
                    "datasets": inputs.hashes(),
                }
            )
            for record in result.as_records():
                sink.emit(record)
        if params["model_out"]:
            with open(params["model_out"], "w", encoding="utf-8", newline="\n") as f:
                save_model(result.model, f)


@cli.command("timing")
@_data_options
@click.option("--depths", callback=_int_list, default=_csv(defaults.TIMING_DEPTHS), show_default=True)
@click.option("--reps", type=click.IntRange(min=1), default=defaults.TIMING_REPS, show_default=True)
@click.option("--nu", type=float, default=defaults.NU, show_default=True)
@click.option("--lr", type=float, default=defaults.LR, show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=defaults.BATCH_SIZE, show_default=True)
@click.option(
    "--momentum",
    type=float,
    default=0.0,
    show_default=True,
    help="Heavy-ball momentum; nonzero values make every step touch all rows.",
)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def timing_cmd(**params: Any) -> None:
    """Median time of one SGD epoch with exact and with fast inference, per depth."""
    with tracer.start_as_current_span("timing"):
        if not params.get("train") and params.get("synthetic") is None:
            params["synthetic"] = "tree"
        inputs = _load_inputs(params)
        train_set, _, _ = inputs.augmented()
        config = OptimizerConfig(
            nu=params["nu"],
            eta=params["lr"],
            batch_size=params["batch"],
            momentum=params["momentum"],
            seed=params["seed"],
        )
        rows = timing(train_set, params["depths"], params["reps"], config)
        with RecordSink(params["metrics_out"]) as sink:
            for row in rows:
                sink.emit(row.as_record())
        for depth, ratio in timing_ratios(rows).items():
            logger.info("depth %d: exact/fast = %.2f", depth, ratio)


@cli.command("depth-sweep")
@_data_options
@_optimizer_options
@click.option("--depths", callback=_int_list, default=_csv(defaults.SWEEP_DEPTHS), show_default=True)
@click.option("--methods", default=_csv(DEPTH_SWEEP_METHODS), show_default=True)
@click.option("--nu-grid", callback=_float_list, default=None, help="Tune non-greedy methods per depth over this grid (needs validation data).")
@click.option("--lr-grid", callback=_float_list, default=None)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def depth_sweep_cmd(**params: Any) -> None:
    """Train and test accuracy of every method at every depth."""
    with tracer.start_as_current_span("depth-sweep"):
        inputs = _load_inputs(params, need_test=True)
        train_set, validation, test = inputs.augmented()
        assert test is not None
        methods = [m.strip() for m in params["methods"].split(",") if m.strip()]
        rows = depth_sweep(
            train_set,
            test,
            params["depths"],
            _optimizer_config(params),
            params["epochs"],
            _greedy_config(params),
            methods,
            validation,
            params["nu_grid"] or (),
            params["lr_grid"] or (),
            params["workers"],
        )
        with RecordSink(params["metrics_out"]) as sink:
            for row in rows:
                sink.emit(row.as_record())


@cli.command("nu-effect")
@_data_options
@_optimizer_options
@click.option("--depth", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--nu-grid", callback=_float_list, default=_csv(defaults.NU_GRID), show_default=True)
@click.option("--seeds", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def nu_effect_cmd(**params: Any) -> None:
    """Active leaves and accuracy after training, per nu (median over seeds)."""
    with tracer.start_as_current_span("nu-effect"):
        inputs = _load_inputs(params, need_test=True)
        train_set, _, test = inputs.augmented()
        rows = nu_effect(
            train_set,
            test,
            params["depth"],
            params["nu_grid"],
            _optimizer_config(params),
            params["epochs"],
            params["seeds"],
            InitMethod(params["init"]),
            _greedy_config(params),
            params["workers"],
        )
        with RecordSink(params["metrics_out"]) as sink:
            for row in rows:
                sink.emit(row.as_record())


@cli.command("replay")
@click.option("--metrics", "metrics_path", type=click.Path(dir_okay=False), required=True, help="Metrics file of a train run.")
@click.option("--model-out", type=click.Path(dir_okay=False), required=True)
@click.option("--metrics-out", type=click.Path(dir_okay=False), default=None)
@_handles_errors
def replay_cmd(metrics_path: str, model_out: str, metrics_out: Optional[str]) -> None:
    """Rerun a train command from its run record and compare the resulting model."""
    with tracer.start_as_current_span("replay"):
        with open(metrics_path, "r", encoding="utf-8") as f:
            first = f.readline()
        try:
            record = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DataError(f"run record is not JSON ({exc.msg})", 1, exc.colno) from None
        if record.get("record") != "run" or record.get("command") != "train":
            raise DataError("first record is not a train run record", 1)
        for name, entry in record.get("files", {}).items():
            if file_hash(entry["path"]) != entry["sha256"]:
                raise DataError(f"{name} file {entry['path']} changed since the recorded run")
        params = dict(record["params"])
        original = params.get("model_out")
        params.update(model_out=model_out, metrics_out=metrics_out)
        for key in ("nu_grid", "lr_grid", "depths"):
            if isinstance(params.get(key), list):
                params[key] = tuple(params[key])
        run_train(params)
        identical = None
        if original and Path(original).exists():
            identical = Path(original).read_bytes() == Path(model_out).read_bytes()
            logger.info("Replayed model %s the original", "matches" if identical else "differs from")
        click.echo(
            json.dumps(
                {"record": "replay", "model": model_out, "original": original, "identical": identical}
            )
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point returning the process exit code."""
    args: List[str] = list(sys.argv[1:] if argv is None else argv)
    try:
        # without standalone mode click returns ctx.exit() codes instead of raising
        result = cli.main(args=args, prog_name="obtree", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    return result if isinstance(result, int) else 0
