"""Run PIPG, IPG and SGD experiments from a JSON config and write figure data as CSV.

For every (solver, γ) pair of the config the script writes a relative-error trace,
the final posterior mean with ±2σ bars, and (PIPG only) covariance diagonals,
plus a ``manifest.json`` echoing the resolved config and seeds.

Usage:
    python scripts/pipg_experiment.py run --config experiments/ridge_desk/ridge_desk.json --out out/ridge
    python scripts/pipg_experiment.py run --config experiments/sparse_nonlinear_desk/sparse_nonlinear_desk.json
    python scripts/pipg_experiment.py replay --dataset out/ridge/dataset.csv \
        --config experiments/ridge_desk/ridge_desk.json --out out/replay

Exit codes: 0 success, 1 config or dataset error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import tempfile
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from pipg.datagen.datagen import (
    ARGenConfig,
    GeneratedProblem,
    RidgeGenConfig,
    export_problem,
    generate_ridge,
    generate_sparse_nonlinear,
    load_dataset,
)
from pipg.errors import ConfigError, DatasetParseError, InvalidArgumentError, SolverRunError
from pipg.models.models import (
    Dataset,
    LinearObservation,
    QuadraticRegularizer,
    Regularizer,
    SigmoidLinearObservation,
    SmoothedL2L1Regularizer,
    ZeroRegularizer,
)
from pipg.solvers.solvers import (
    ScheduleConfig,
    ScheduleKind,
    SolverConfig,
    Trace,
    iterations_to_reach,
    run_ipg,
    run_pipg,
    run_sgd,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

SOLVER_NAMES = ("pipg", "ipg", "sgd")
EXPERIMENT_KINDS = ("ridge", "sparse-nonlinear", "custom")
OBSERVATIONS = {"linear": LinearObservation, "sigmoid": SigmoidLinearObservation}

# Manifest acceptance metrics.
STABILITY_FACTOR = 1.1
LAST_DECILE = 0.1

_MEMBER_COLON = re.compile(r"\s*:\s*")


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str
    lam: float = 0.0
    delta: float = 0.1

    def build(self, dim: int) -> Regularizer:
        if self.kind == "quadratic":
            return QuadraticRegularizer.ridge(self.lam, dim)
        if self.kind == "smoothed-l2l1":
            return SmoothedL2L1Regularizer(strength=self.lam, smoothing=self.delta)
        return ZeroRegularizer(dim)


@dataclass(frozen=True)
class BaselineSpec:
    """Baseline solver settings.

    The grid value γ becomes the schedule's first step (``base`` or ``alpha0``)
    unless the config sets that step itself, in which case every run uses it.
    """

    schedule: ScheduleConfig
    passes: int = 1
    shuffle: bool = False
    fixed_leading_step: bool = False

    def schedule_for(self, gamma: float) -> ScheduleConfig:
        if self.fixed_leading_step:
            return self.schedule
        return self.schedule.with_leading_step(gamma)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment description.

    ``pipg`` carries γ = the first grid value; each run replaces γ and the seed.
    """

    experiment: str
    seed: int
    gamma_grid: tuple[float, ...]
    observation: str
    regularizer: RegularizerSpec
    generator: RidgeGenConfig | ARGenConfig | None = None
    dataset_path: Path | None = None
    output_dir: Path | None = None
    pipg: SolverConfig | None = None
    ipg: BaselineSpec | None = None
    sgd: BaselineSpec | None = None
    rmse_stride: int = 10
    cov_stride: int | None = None
    resolved: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def solvers(self) -> list[str]:
        return [name for name in SOLVER_NAMES if getattr(self, name) is not None]


@dataclass(frozen=True)
class RunResult:
    solver: str
    gamma: float
    gamma_index: int
    seed: int
    trace: Trace
    schedule: ScheduleConfig | None = None


class _ConfigReader:
    """Typed access to the raw JSON with line-numbered errors.

    Every section handed out by :meth:`section` remembers its key path, so an
    error on a key names the line of that key inside its own section even when
    the same key name appears elsewhere in the document.
    """

    def __init__(self, text: str, root: dict[str, Any]) -> None:
        self.text = text
        self._paths: dict[int, tuple[str, ...]] = {id(root): ()}

    def alias(self, derived: dict[str, Any], source: dict[str, Any]) -> dict[str, Any]:
        """Let ``derived`` (e.g. ``source`` merged with defaults) report lines of ``source``."""
        if id(source) in self._paths:
            self._paths[id(derived)] = self._paths[id(source)]
        return derived

    def line_of(self, key: str, data: dict[str, Any] | None = None) -> int | None:
        path = None if data is None else self._paths.get(id(data))
        if path is None:
            match = re.search(rf'"{re.escape(key)}"\s*:', self.text)
            return None if match is None else self._line(match.start())
        root = self.text.find("{")
        if root < 0:
            return None
        start, end = root, self._value_end(root)
        for name in path:
            member = self._find_member(name, start, end)
            if member is None:
                return self._line(start)
            _, start, end = member
        member = self._find_member(key, start, end)
        return self._line(start if member is None else member[0])

    def error(self, key: str, message: str, data: dict[str, Any] | None = None) -> ConfigError:
        return ConfigError(f"'{key}': {message}", line=self.line_of(key, data))

    def section(self, data: dict[str, Any], key: str) -> dict[str, Any]:
        value = data.get(key, {})
        if not isinstance(value, dict):
            raise self.error(key, "must be an object", data)
        if id(data) in self._paths:
            self._paths[id(value)] = (*self._paths[id(data)], key)
        return value

    def number(
        self,
        data: dict[str, Any],
        key: str,
        default: float | None = None,
        *,
        positive: bool = False,
        nonnegative: bool = False,
    ) -> float:
        value = data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise self.error(key, f"must be a number, got {value!r}", data)
        if positive and not value > 0:
            raise self.error(key, f"must be positive, got {value}", data)
        if nonnegative and not value >= 0:
            raise self.error(key, f"must be nonnegative, got {value}", data)
        return float(value)

    def integer(self, data: dict[str, Any], key: str, default: int | None = None, *, minimum: int = 0) -> int:
        value = data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"must be an integer, got {value!r}", data)
        if value < minimum:
            raise self.error(key, f"must be >= {minimum}, got {value}", data)
        return value

    def boolean(self, data: dict[str, Any], key: str, default: bool) -> bool:
        value = data.get(key, default)
        if not isinstance(value, bool):
            raise self.error(key, f"must be true or false, got {value!r}", data)
        return value

    def _line(self, position: int) -> int:
        return self.text.count("\n", 0, position) + 1

    def _string_end(self, start: int) -> int:
        escaped = False
        for j in range(start + 1, len(self.text)):
            char = self.text[j]
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                return j
        return len(self.text) - 1

    def _value_end(self, start: int) -> int:
        """Index one past the object or array opening at ``start``; ``start`` for scalars."""
        if self.text[start] not in "{[":
            return start
        depth = 0
        j = start
        while j < len(self.text):
            char = self.text[j]
            if char == '"':
                j = self._string_end(j)
            elif char in "{[":
                depth += 1
            elif char in "}]":
                depth -= 1
                if depth == 0:
                    return j + 1
            j += 1
        return len(self.text)

    def _find_member(self, name: str, start: int, end: int) -> tuple[int, int, int] | None:
        """Key position and value span of the direct member ``name`` of the object at ``start``."""
        depth = 0
        j = start
        while j < end:
            char = self.text[j]
            if char == '"':
                close = self._string_end(j)
                colon = _MEMBER_COLON.match(self.text, close + 1)
                if depth == 1 and colon is not None and json.loads(self.text[j : close + 1]) == name:
                    value_start = colon.end()
                    return j, value_start, self._value_end(value_start)
                j = close
            elif char in "{[":
                depth += 1
            elif char in "}]":
                depth -= 1
            j += 1
        return None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and validate an experiment JSON document.

    Args:
        text: JSON text.
        base_dir: Directory relative paths in the config are resolved against.

    Raises:
        ConfigError: With the line of the offending key when it can be located.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", line=1)
    reader = _ConfigReader(text, raw)

    experiment = raw.get("experiment")
    if experiment not in EXPERIMENT_KINDS:
        raise reader.error("experiment", f"must be one of {', '.join(EXPERIMENT_KINDS)}, got {experiment!r}", raw)
    seed = reader.integer(raw, "seed", 0)

    default_observation = "sigmoid" if experiment == "sparse-nonlinear" else "linear"
    observation = raw.get("observation", default_observation)
    if observation not in OBSERVATIONS:
        raise reader.error("observation", f"must be one of {', '.join(OBSERVATIONS)}, got {observation!r}", raw)

    regularizer = _parse_regularizer(reader, raw, experiment)
    generator = _parse_generator(reader, raw, experiment, seed)

    dataset_path = None
    if "dataset" in raw:
        if not isinstance(raw["dataset"], str):
            raise reader.error("dataset", "must be a path string", raw)
        dataset_path = Path(raw["dataset"])
        if base_dir is not None and not dataset_path.is_absolute():
            dataset_path = base_dir / dataset_path

    output_dir = None
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str):
            raise reader.error("output_dir", "must be a path string", raw)
        output_dir = Path(raw["output_dir"])

    trace = reader.section(raw, "trace")
    rmse_stride = reader.integer(trace, "rmse_stride", 10, minimum=1)
    cov_stride = None if trace.get("cov_stride") is None else reader.integer(trace, "cov_stride", minimum=1)

    # A plain list selects solvers with default settings.
    if isinstance(raw.get("solvers"), list):
        raw["solvers"] = {name: {} for name in raw["solvers"] if isinstance(name, str)}
    solvers = reader.section(raw, "solvers")
    if not solvers:
        raise reader.error("solvers", "at least one solver must be selected", raw)
    unknown = sorted(set(solvers) - set(SOLVER_NAMES))
    if unknown:
        raise reader.error("solvers", f"unknown solver(s): {', '.join(unknown)}", raw)

    grid = _parse_grid(reader, raw, solvers)

    pipg = None
    if "pipg" in solvers:
        section = reader.section(solvers, "pipg")
        try:
            pipg = SolverConfig(
                gamma=grid[0],
                v0_scale=reader.number(section, "v0_scale", 1.0, positive=True),
                process_noise_scale=reader.number(section, "process_noise_scale", 0.0, nonnegative=True),
                passes=reader.integer(section, "passes", 1, minimum=1),
                shuffle=reader.boolean(section, "shuffle", False),
                seed=seed,
                rmse_stride=rmse_stride,
                cov_stride=cov_stride,
            )
        except InvalidArgumentError as exc:
            raise reader.error("pipg", str(exc), solvers) from exc

    ipg = None
    if "ipg" in solvers:
        if observation != "linear" or regularizer.kind == "smoothed-l2l1":
            raise reader.error("ipg", "IPG needs linear observations and a quadratic or zero regularizer", solvers)
        ipg = _parse_baseline(reader, reader.section(solvers, "ipg"), ScheduleKind.POLYNOMIAL_DECAY)

    sgd = None
    if "sgd" in solvers:
        sgd = _parse_baseline(reader, reader.section(solvers, "sgd"), ScheduleKind.RATIONAL_DECAY)

    config = ExperimentConfig(
        experiment=experiment,
        seed=seed,
        gamma_grid=grid,
        observation=observation,
        regularizer=regularizer,
        generator=generator,
        dataset_path=dataset_path,
        output_dir=output_dir,
        pipg=pipg,
        ipg=ipg,
        sgd=sgd,
        rmse_stride=rmse_stride,
        cov_stride=cov_stride,
    )
    return replace(config, resolved=_resolved_view(config))


def _parse_regularizer(reader: _ConfigReader, raw: dict[str, Any], experiment: str) -> RegularizerSpec:
    defaults = {
        "ridge": {"kind": "quadratic", "lambda": 1e-2},
        "sparse-nonlinear": {"kind": "smoothed-l2l1", "lambda": 1e-5, "delta": 0.1},
        "custom": {"kind": "zero"},
    }[experiment]
    given = reader.section(raw, "regularizer")
    section = reader.alias({**defaults, **given}, given)
    kind = section["kind"]
    if kind == "quadratic":
        return RegularizerSpec(kind=kind, lam=reader.number(section, "lambda", nonnegative=True))
    if kind == "smoothed-l2l1":
        return RegularizerSpec(
            kind=kind,
            lam=reader.number(section, "lambda", positive=True),
            delta=reader.number(section, "delta", 0.1, positive=True),
        )
    if kind == "zero":
        return RegularizerSpec(kind=kind)
    raise reader.error("kind", f"regularizer kind must be quadratic, smoothed-l2l1 or zero, got {kind!r}", section)


def _parse_generator(
    reader: _ConfigReader,
    raw: dict[str, Any],
    experiment: str,
    seed: int,
) -> RidgeGenConfig | ARGenConfig | None:
    if experiment == "custom":
        return None
    section = reader.section(raw, "generator")
    try:
        if experiment == "ridge":
            return RidgeGenConfig(
                dimension=reader.integer(section, "dimension", 20, minimum=1),
                count=reader.integer(section, "count", 5000, minimum=1),
                noise_variance=reader.number(section, "noise_variance", 1.0, positive=True),
                seed=seed,
            )
        sparsity = section.get("sparsity")
        return ARGenConfig(
            dimension=reader.integer(section, "dimension", 10, minimum=1),
            count=reader.integer(section, "count", 20000, minimum=1),
            ar_coefficient=reader.number(section, "ar_coefficient", 0.8),
            noise_precision=reader.number(section, "noise_precision", 1.0, positive=True),
            sparsity=None if sparsity is None else reader.integer(section, "sparsity", minimum=1),
            seed=seed,
        )
    except InvalidArgumentError as exc:
        raise reader.error("generator", str(exc), raw) from exc


def _parse_grid(reader: _ConfigReader, raw: dict[str, Any], solvers: dict[str, Any]) -> tuple[float, ...]:
    grid = raw.get("gamma_grid")
    if grid is None:
        values = [reader.number(reader.section(solvers, "pipg"), "gamma", 1.0, positive=True)]
    elif isinstance(grid, dict):
        grid = reader.section(raw, "gamma_grid")
        start = reader.number(grid, "start", positive=True)
        stop = reader.number(grid, "stop", positive=True)
        num = reader.integer(grid, "num", minimum=1)
        values = [float(v) for v in np.linspace(start, stop, num)]
    elif isinstance(grid, list) and grid:
        values = []
        for value in grid:
            if isinstance(value, bool) or not isinstance(value, int | float) or not value > 0:
                raise reader.error("gamma_grid", f"values must be positive numbers, got {value!r}", raw)
            values.append(float(value))
    else:
        raise reader.error("gamma_grid", "must be a nonempty list or a {start, stop, num} object", raw)
    labels = [gamma_label(v) for v in values]
    if len(set(labels)) != len(labels):
        raise reader.error("gamma_grid", "values must be distinct at 6 significant digits", raw)
    return tuple(values)


def _parse_baseline(reader: _ConfigReader, section: dict[str, Any], default_kind: ScheduleKind) -> BaselineSpec:
    schedule_section = reader.section(section, "schedule")
    kind = schedule_section.get("kind", default_kind.value)
    try:
        schedule = ScheduleConfig(
            kind=ScheduleKind(kind),
            base=reader.number(schedule_section, "base", 1.0, positive=True),
            decay_exponent=reader.number(schedule_section, "decay_exponent", 0.51, nonnegative=True),
            alpha0=reader.number(schedule_section, "alpha0", 1.0, positive=True),
            alpha1=reader.number(schedule_section, "alpha1", 1e-4, nonnegative=True),
        )
    except ValueError as exc:
        raise reader.error("schedule", str(exc), section) from exc
    leading_key = "alpha0" if schedule.kind is ScheduleKind.RATIONAL_DECAY else "base"
    return BaselineSpec(
        schedule=schedule,
        fixed_leading_step=leading_key in schedule_section,
        passes=reader.integer(section, "passes", 1, minimum=1),
        shuffle=reader.boolean(section, "shuffle", False),
    )


def _schedule_view(schedule: ScheduleConfig) -> dict[str, Any]:
    view = asdict(schedule)
    view["kind"] = schedule.kind.value
    return view


def _resolved_view(config: ExperimentConfig) -> dict[str, Any]:
    def baseline(spec: BaselineSpec | None) -> dict[str, Any] | None:
        if spec is None:
            return None
        return {
            "schedule": _schedule_view(spec.schedule),
            "leading_step": "config" if spec.fixed_leading_step else "gamma_grid",
            "passes": spec.passes,
            "shuffle": spec.shuffle,
        }

    pipg = None
    if config.pipg is not None:
        pipg = {
            "v0_scale": config.pipg.v0_scale,
            "process_noise_scale": config.pipg.process_noise_scale,
            "passes": config.pipg.passes,
            "shuffle": config.pipg.shuffle,
        }
    return {
        "experiment": config.experiment,
        "seed": config.seed,
        "gamma_grid": list(config.gamma_grid),
        "observation": config.observation,
        "regularizer": asdict(config.regularizer),
        "generator": None if config.generator is None else asdict(config.generator),
        "solvers": {"pipg": pipg, "ipg": baseline(config.ipg), "sgd": baseline(config.sgd)},
        "trace": {"rmse_stride": config.rmse_stride, "cov_stride": config.cov_stride},
    }


def load_config(path: Path) -> ExperimentConfig:
    """Read and parse a config file; relative dataset paths resolve next to it."""
    return parse_config(path.read_text(), base_dir=path.parent)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Override the master seed everywhere it was propagated."""
    generator = None if config.generator is None else replace(config.generator, seed=seed)
    pipg = None if config.pipg is None else replace(config.pipg, seed=seed)
    updated = replace(config, seed=seed, generator=generator, pipg=pipg)
    return replace(updated, resolved=_resolved_view(updated))


def gamma_label(gamma: float) -> str:
    return format(gamma, ".6g")


def run_seed(master_seed: int, solver: str, gamma_index: int) -> int:
    """Seed of one (solver, γ) run, derived from the master seed."""
    sequence = np.random.SeedSequence(master_seed, spawn_key=(SOLVER_NAMES.index(solver), gamma_index))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def generate_problem(config: ExperimentConfig) -> GeneratedProblem:
    if isinstance(config.generator, RidgeGenConfig):
        return generate_ridge(config.generator)
    if isinstance(config.generator, ARGenConfig):
        return generate_sparse_nonlinear(config.generator)
    raise ConfigError(f"experiment {config.experiment!r} has no generator; give a 'dataset' path or use replay")


def execute_run(
    config: ExperimentConfig,
    dataset: Dataset,
    ground_truth: np.ndarray | None,
    solver: str,
    gamma_index: int,
) -> RunResult:
    """Run one (solver, γ) combination."""
    gamma = config.gamma_grid[gamma_index]
    seed = run_seed(config.seed, solver, gamma_index)
    factory = OBSERVATIONS[config.observation]
    reg = config.regularizer.build(dataset.dimension)
    logger.info("Running %s with gamma=%s (seed %d)", solver, gamma_label(gamma), seed)

    schedule = None
    if solver == "pipg":
        cfg = replace(config.pipg, gamma=gamma, seed=seed)
        trace = run_pipg(dataset, factory, reg, cfg, ground_truth)
    else:
        spec = config.ipg if solver == "ipg" else config.sgd
        schedule = spec.schedule_for(gamma)
        options = {
            "passes": spec.passes,
            "shuffle": spec.shuffle,
            "seed": seed,
            "rmse_stride": config.rmse_stride,
        }
        if solver == "ipg":
            trace = run_ipg(dataset, reg, schedule, ground_truth, **options)
        else:
            trace = run_sgd(dataset, factory, reg, schedule, ground_truth, **options)
    return RunResult(solver=solver, gamma=gamma, gamma_index=gamma_index, seed=seed, trace=trace, schedule=schedule)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_csv_atomic(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a CSV through a temporary file in the same directory, then rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(  # noqa: SIM115
        "w", newline="", dir=path.parent, prefix=f".{path.name}.", delete=False
    )
    try:
        with handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(handle.name, path)
    except BaseException:
        Path(handle.name).unlink(missing_ok=True)
        raise


def write_json_atomic(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile("w", dir=path.parent, prefix=f".{path.name}.", delete=False)  # noqa: SIM115
    try:
        with handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
        os.replace(handle.name, path)
    except BaseException:
        Path(handle.name).unlink(missing_ok=True)
        raise


def write_run_outputs(result: RunResult, out_dir: Path, single_gamma: bool) -> dict[str, Any]:
    """Write the trace, posterior and covariance files of one run; return its manifest entry."""
    trace = result.trace
    label = gamma_label(result.gamma)
    suffix = result.solver if single_gamma else f"{result.solver}_{label}"
    has_rmse = bool(trace.records) and trace.records[0].rmse is not None

    trace_file = f"trace_{result.solver}_{label}.csv"
    if has_rmse:
        write_csv_atomic(
            out_dir / trace_file,
            ["pass", "iter", "rmse"],
            ([r.pass_index, r.iteration, _fmt(r.rmse)] for r in trace.records),
        )
    else:
        write_csv_atomic(out_dir / trace_file, ["pass", "iter"], ([r.pass_index, r.iteration] for r in trace.records))

    posterior_file = f"posterior_{suffix}.csv"
    mean = trace.final_mean
    if trace.final_state is not None:
        two_sigma = 2.0 * np.sqrt(np.clip(np.diag(trace.final_state.cov), 0.0, None))
        rows = ([i, _fmt(m), _fmt(s)] for i, (m, s) in enumerate(zip(mean, two_sigma, strict=True)))
    else:
        rows = ([i, _fmt(m), ""] for i, m in enumerate(mean))
    write_csv_atomic(out_dir / posterior_file, ["index", "mean", "two_sigma"], rows)

    entry: dict[str, Any] = {
        "solver": result.solver,
        "gamma": result.gamma,
        "seed": result.seed,
        "trace_file": trace_file,
        "posterior_file": posterior_file,
        "final_rmse": trace.final_rmse,
    }
    if result.schedule is not None:
        entry["schedule"] = _schedule_view(result.schedule)
    if has_rmse:
        entry["iterations_to_stability"] = iterations_to_reach(trace, STABILITY_FACTOR * trace.final_rmse)

    if trace.cov_snapshots:
        cov_file = f"cov_diag_{suffix}.csv"
        write_csv_atomic(
            out_dir / cov_file,
            ["iter", "index", "value"],
            (
                [snap.iteration, i, _fmt(v)]
                for snap in trace.cov_snapshots
                for i, v in enumerate(snap.diagonal)
            ),
        )
        entry["cov_diag_file"] = cov_file
        entry["min_eigenvalue"] = min(snap.min_eigenvalue for snap in trace.cov_snapshots)
        entry["cov_diag_last_decile_ratio"] = last_decile_ratio(trace)
    return entry


def last_decile_ratio(trace: Trace) -> float:
    """Largest ratio, over coordinates, of the last-decile range of V_k's diagonal to its run-wide range."""
    diagonals = np.array([snap.diagonal for snap in trace.cov_snapshots])
    tail = diagonals[int(np.floor((1.0 - LAST_DECILE) * len(diagonals))) :]
    overall = np.ptp(diagonals, axis=0)
    settled = np.ptp(tail, axis=0)
    ratios = np.divide(settled, overall, out=np.zeros_like(settled), where=overall > 0)
    return float(ratios.max())


def run_experiment(
    config: ExperimentConfig,
    out_dir: Path,
    *,
    dataset: Dataset | None = None,
    ground_truth: np.ndarray | None = None,
    jobs: int = 1,
    export_dataset: bool = False,
) -> int:
    """Execute every (solver, γ) run of ``config`` and write its outputs to ``out_dir``.

    Returns:
        The process exit status.
    """
    metadata: dict[str, Any] = {}
    if dataset is None:
        if config.dataset_path is not None:
            dataset, ground_truth = load_dataset(config.dataset_path)
            metadata = {"source": str(config.dataset_path)}
        else:
            problem = generate_problem(config)
            dataset, ground_truth = problem.dataset, problem.ground_truth
            metadata = problem.metadata
            if export_dataset:
                export_problem(problem, out_dir)
    logger.info("Dataset: n=%d, d=%d", dataset.count, dataset.dimension)

    tasks = [(solver, index) for solver in config.solvers for index in range(len(config.gamma_grid))]
    logger.info("Scheduled %d run(s) over %d gamma value(s)", len(tasks), len(config.gamma_grid))

    def attempt(task: tuple[str, int]) -> RunResult | SolverRunError:
        solver, index = task
        try:
            return execute_run(config, dataset, ground_truth, solver, index)
        except SolverRunError as exc:
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(attempt, tasks))
    else:
        outcomes = [attempt(task) for task in tasks]

    single_gamma = len(config.gamma_grid) == 1
    runs: list[dict[str, Any]] = []
    failed: list[str] = []
    for (solver, index), outcome in zip(tasks, outcomes, strict=True):
        gamma = config.gamma_grid[index]
        if isinstance(outcome, SolverRunError):
            logger.error("Run at gamma=%s failed: %s", gamma_label(gamma), outcome)
            failed.append(f"{solver}@{gamma_label(gamma)}")
            continue
        runs.append(write_run_outputs(outcome, out_dir, single_gamma))

    manifest = {
        "config": config.resolved,
        "seed": config.seed,
        "dataset": {"count": dataset.count, "dimension": dataset.dimension, **_jsonable(metadata)},
        "has_ground_truth": ground_truth is not None,
        "acceptance": {"stability_factor": STABILITY_FACTOR, "last_decile": LAST_DECILE},
        "runs": runs,
        "failed": failed,
    }
    write_json_atomic(out_dir / "manifest.json", manifest)

    logger.info("=" * 60)
    logger.info("Completed: %d/%d runs", len(runs), len(tasks))
    if failed:
        logger.warning("Failed runs (%d): %s", len(failed), ", ".join(failed))
    logger.info("=" * 60)
    return EXIT_NUMERIC if failed else EXIT_OK


def _jsonable(metadata: dict[str, Any]) -> dict[str, Any]:
    return {key: value for key, value in metadata.items() if isinstance(value, str | int | float | bool | None)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Run PIPG / IPG / SGD experiments and write figure data as CSV",
    )
    parser.add_argument(
        "--verbose",
        action="store_true",
        help="Enable verbose debug logging",
    )
    subcommands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, required=True, help="Path to the experiment JSON config")
        sub.add_argument(
            "--seed",
            type=int,
            default=None,
            help="Master seed overriding the config (falls back to PIPG_SEED env var)",
        )
        sub.add_argument("--out", type=Path, default=None, help="Output directory (overrides output_dir)")
        sub.add_argument("--jobs", type=int, default=1, help="Number of runs executed in parallel (default: 1)")

    run = subcommands.add_parser("run", help="Generate data from the config and run the solvers")
    add_common(run)
    run.add_argument(
        "--export-dataset",
        action="store_true",
        help="Also write dataset.csv and theta_star.csv to the output directory",
    )

    replay = subcommands.add_parser("replay", help="Run the solvers on a previously exported dataset")
    add_common(replay)
    replay.add_argument("--dataset", type=Path, required=True, help="Path to a dataset.csv file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    logger.info("=" * 60)
    logger.info("Starting %s with config %s", args.command, args.config)
    logger.info("=" * 60)

    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else os.environ.get("PIPG_SEED")
        if seed is not None:
            try:
                config = with_seed(config, int(seed))
            except (TypeError, ValueError, InvalidArgumentError) as exc:
                raise ConfigError(f"invalid seed {seed!r}: {exc}") from exc
        out_dir = args.out or config.output_dir
        if out_dir is None:
            raise ConfigError("no output directory: pass --out or set output_dir in the config")
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        logger.info("Output directory: %s", out_dir)

        if args.command == "replay":
            dataset, ground_truth = load_dataset(args.dataset)
            return run_experiment(config, out_dir, dataset=dataset, ground_truth=ground_truth, jobs=args.jobs)
        return run_experiment(config, out_dir, jobs=args.jobs, export_dataset=args.export_dataset)
    except (ConfigError, DatasetParseError, InvalidArgumentError) as exc:
        logger.error("Invalid input: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        logger.error("I/O error: %s", exc, exc_info=args.verbose)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
