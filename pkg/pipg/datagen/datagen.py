"""Seeded synthetic problems for the ridge and sparse nonlinear experiments.

Each generator draws from one ``numpy.random.Generator`` (PCG64) seeded with the
config's ``seed``, in a fixed draw order, so a config reproduces its problem bit
for bit.

Problems can be written to ``dataset.csv`` (header ``y,x_1,...,x_d``) with the
ground truth in a ``theta_star.csv`` sidecar, and read back for replay.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.signal import lfilter
from scipy.special import expit

from pipg.errors import DatasetParseError, InvalidArgumentError
from pipg.models.models import Dataset

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.csv"
GROUND_TRUTH_FILE = "theta_star.csv"


@dataclass(frozen=True)
class RidgeGenConfig:
    """Linear-Gaussian regression: y_k = x_kᵀθ* + η_k, η_k ~ N(0, noise_variance)."""

    dimension: int
    count: int
    noise_variance: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise InvalidArgumentError(f"dimension must be >= 1, got {self.dimension}")
        if self.count < 1:
            raise InvalidArgumentError(f"count must be >= 1, got {self.count}")
        if not self.noise_variance > 0:
            raise InvalidArgumentError(f"noise_variance must be positive, got {self.noise_variance}")
        if self.seed < 0:
            raise InvalidArgumentError(f"seed must be nonnegative, got {self.seed}")


@dataclass(frozen=True)
class ARGenConfig:
    """Sparse filter identification behind a sigmoid, driven by an AR(1) input.

    ``sparsity`` defaults to max(1, ⌊0.1·d⌋) nonzero taps.
    """

    dimension: int
    count: int
    ar_coefficient: float = 0.8
    noise_precision: float = 1.0
    sparsity: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise InvalidArgumentError(f"dimension must be >= 1, got {self.dimension}")
        if self.count < 1:
            raise InvalidArgumentError(f"count must be >= 1, got {self.count}")
        if not abs(self.ar_coefficient) < 1:
            raise InvalidArgumentError(f"ar_coefficient must satisfy |a| < 1, got {self.ar_coefficient}")
        if not self.noise_precision > 0:
            raise InvalidArgumentError(f"noise_precision must be positive, got {self.noise_precision}")
        if self.sparsity is None:
            object.__setattr__(self, "sparsity", max(1, math.floor(0.1 * self.dimension)))
        elif not 0 < self.sparsity <= self.dimension:
            raise InvalidArgumentError(f"sparsity must be in [1, {self.dimension}], got {self.sparsity}")
        if self.seed < 0:
            raise InvalidArgumentError(f"seed must be nonnegative, got {self.seed}")


@dataclass(frozen=True, eq=False)
class GeneratedProblem:
    dataset: Dataset
    ground_truth: NDArray[np.float64]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        truth = np.asarray(self.ground_truth, dtype=np.float64)
        if truth.shape != (self.dataset.dimension,):
            raise InvalidArgumentError(
                f"ground truth has shape {truth.shape}, dataset dimension is {self.dataset.dimension}"
            )
        object.__setattr__(self, "ground_truth", truth)


def generate_ridge(cfg: RidgeGenConfig) -> GeneratedProblem:
    """Draw θ* ~ N(0, I), x_k ~ N(0, I) i.i.d. and noisy linear responses."""
    rng = np.random.default_rng(cfg.seed)
    theta_star = rng.standard_normal(cfg.dimension)
    regressors = rng.standard_normal((cfg.count, cfg.dimension))
    noise = rng.normal(0.0, math.sqrt(cfg.noise_variance), cfg.count)
    targets = regressors @ theta_star + noise
    logger.debug("Generated ridge problem d=%d n=%d seed=%d", cfg.dimension, cfg.count, cfg.seed)
    return GeneratedProblem(
        dataset=Dataset(targets=targets, regressors=regressors),
        ground_truth=theta_star,
        metadata={"generator": "ridge", **asdict(cfg)},
    )


def ar1_signal(count: int, coefficient: float, rng: np.random.Generator) -> NDArray[np.float64]:
    """x_k = a x_{k-1} + η_k for k = 1..count, with x_0 and η_k standard normal."""
    x0 = rng.standard_normal()
    innovations = rng.standard_normal(count)
    signal, _ = lfilter([1.0], [1.0, -coefficient], innovations, zi=[coefficient * x0])
    return signal


def circulant_regressors(signal: ArrayLike, dimension: int) -> NDArray[np.float64]:
    """Row k is [s_{k-d+1}, ..., s_k], indices taken modulo the signal length."""
    s = np.asarray(signal, dtype=np.float64)
    offsets = np.arange(-dimension + 1, 1)
    index = (np.arange(s.size)[:, np.newaxis] + offsets[np.newaxis, :]) % s.size
    return s[index]


def generate_sparse_nonlinear(cfg: ARGenConfig) -> GeneratedProblem:
    """Sigmoid response of a sparse FIR filter on an AR(1) input, with Gaussian noise of precision γ."""
    rng = np.random.default_rng(cfg.seed)
    signal = ar1_signal(cfg.count, cfg.ar_coefficient, rng)
    regressors = circulant_regressors(signal, cfg.dimension)

    theta_star = np.zeros(cfg.dimension)
    support = rng.choice(cfg.dimension, size=cfg.sparsity, replace=False)
    theta_star[np.sort(support)] = rng.standard_normal(cfg.sparsity)

    noise = rng.normal(0.0, 1.0 / math.sqrt(cfg.noise_precision), cfg.count)
    targets = expit(regressors @ theta_star) + noise
    logger.debug(
        "Generated sparse nonlinear problem d=%d n=%d sparsity=%d seed=%d",
        cfg.dimension,
        cfg.count,
        cfg.sparsity,
        cfg.seed,
    )
    return GeneratedProblem(
        dataset=Dataset(targets=targets, regressors=regressors),
        ground_truth=theta_star,
        metadata={"generator": "sparse-nonlinear", **asdict(cfg)},
    )


def relative_error(estimate: ArrayLike, truth: ArrayLike) -> float:
    """E = ‖estimate - truth‖ / ‖truth‖.

    Raises:
        InvalidArgumentError: On length mismatch or a zero-norm truth.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise InvalidArgumentError(f"estimate shape {estimate.shape} does not match truth shape {truth.shape}")
    norm = float(np.linalg.norm(truth))
    if norm == 0.0:
        raise InvalidArgumentError("relative error is undefined for a zero-norm truth")
    return float(np.linalg.norm(estimate - truth)) / norm


def export_problem(problem: GeneratedProblem, directory: Path) -> tuple[Path, Path]:
    """Write ``dataset.csv`` and ``theta_star.csv`` into ``directory``.

    Values are written with 17 significant digits so they read back bit-exact.
    """
    directory.mkdir(parents=True, exist_ok=True)
    dataset_path = directory / DATASET_FILE
    truth_path = directory / GROUND_TRUTH_FILE
    data = problem.dataset
    header = ["y", *(f"x_{i}" for i in range(1, data.dimension + 1))]
    with dataset_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for y, x in zip(data.targets, data.regressors, strict=True):
            writer.writerow([_fmt(y), *(_fmt(v) for v in x)])
    with truth_path.open("w", newline="") as handle:
        for value in problem.ground_truth:
            handle.write(f"{_fmt(value)}\n")
    logger.info("Exported %d records to %s", data.count, dataset_path)
    return dataset_path, truth_path


def load_dataset(path: Path) -> tuple[Dataset, NDArray[np.float64] | None]:
    """Read a dataset CSV and, when present, its ``theta_star.csv`` sidecar.

    Returns:
        The dataset and the ground truth, or ``None`` when the sidecar is missing.

    Raises:
        DatasetParseError: With the 1-based row number of the first malformed row of
            either file, or when the ground truth is all zeros.
    """
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise DatasetParseError("missing header", row=1)
        dimension = len(header) - 1
        expected = ["y", *(f"x_{i}" for i in range(1, dimension + 1))]
        if dimension < 1 or [h.strip() for h in header] != expected:
            raise DatasetParseError(f"header must be {','.join(expected[:3])},...,x_d", row=1)
        rows: list[list[float]] = []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dimension + 1:
                raise DatasetParseError(f"expected {dimension + 1} fields, got {len(row)}", row=row_number)
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise DatasetParseError(str(exc), row=row_number) from exc
            if not all(math.isfinite(v) for v in values):
                raise DatasetParseError("non-finite value", row=row_number)
            rows.append(values)
    if not rows:
        raise DatasetParseError("dataset has no records", row=2)

    table = np.array(rows, dtype=np.float64)
    dataset = Dataset(targets=table[:, 0], regressors=table[:, 1:])

    truth_path = path.parent / GROUND_TRUTH_FILE
    if not truth_path.exists():
        logger.warning("No ground truth found next to %s; relative errors will not be reported", path)
        return dataset, None
    return dataset, _load_ground_truth(truth_path, dimension)


def _load_ground_truth(path: Path, dimension: int) -> NDArray[np.float64]:
    """One value per line; row numbers in errors are 1-based lines of ``path``."""
    values: list[float] = []
    with path.open(newline="") as handle:
        for row_number, row in enumerate(csv.reader(handle), start=1):
            if not row:
                continue
            if len(row) != 1:
                raise DatasetParseError(f"{path.name}: expected 1 field, got {len(row)}", row=row_number)
            try:
                value = float(row[0])
            except ValueError as exc:
                raise DatasetParseError(f"{path.name}: {exc}", row=row_number) from exc
            if not math.isfinite(value):
                raise DatasetParseError(f"{path.name}: non-finite value", row=row_number)
            values.append(value)
    if len(values) != dimension:
        raise DatasetParseError(f"{path.name} has {len(values)} values, expected {dimension}", row=1)
    truth = np.array(values, dtype=np.float64)
    if not np.any(truth):
        raise DatasetParseError(f"{path.name}: ground truth must have nonzero norm", row=1)
    return truth


def _fmt(value: float) -> str:
    return format(float(value), ".17g")
