"""Iteration drivers: PIPG (exact linear-quadratic and EKF paths), IPG and SGD.

Every driver visits the dataset one observation at a time, optionally over
several passes with a fresh permutation per pass, and returns a :class:`Trace`
of relative errors (when the ground truth is known) and, for PIPG, covariance
diagonal snapshots.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field, replace
from enum import StrEnum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from pipg.datagen.datagen import relative_error
from pipg.errors import (
    IllConditionedError,
    InternalInvariantError,
    InvalidArgumentError,
    NumericInputError,
    SolverRunError,
)
from pipg.kalman_core.kalman_core import (
    MeasurementLinearization,
    PosteriorState,
    min_eigenvalue,
    predict,
    rank_one_update,
)
from pipg.models.models import (
    Dataset,
    LinearObservation,
    Observation,
    ObservationModel,
    QuadraticRegularizer,
    Regularizer,
    ZeroRegularizer,
    gradient_step_map,
    prox_quadratic_metric,
    transition_matrix,
)

__all__ = [
    "CovarianceSnapshot",
    "Dataset",
    "Observation",
    "ScheduleConfig",
    "ScheduleKind",
    "SolverConfig",
    "Trace",
    "TraceRecord",
    "iterations_to_reach",
    "pipg_step_general",
    "pipg_step_linear",
    "run_ipg",
    "run_pipg",
    "run_sgd",
]

logger = logging.getLogger(__name__)

ObservationModelFactory = Callable[[NDArray[np.float64]], ObservationModel]

DEFAULT_RMSE_STRIDE = 10
COVARIANCE_SNAPSHOTS = 100

# Failures that abort a run and are reported with their location. Argument errors propagate as is.
_NUMERIC_FAILURES = (NumericInputError, InternalInvariantError, IllConditionedError)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Hyperparameters of a PIPG run.

    ``gamma`` is both the step size and the observation-noise precision. The prior
    is N(initial_mean, V₀) with V₀ = ``initial_cov`` when given, else
    ``v0_scale``·I, and the initial mean defaults to zero. Process noise
    Q = ``process_noise_scale``·I is only used on the EKF path.
    """

    gamma: float
    v0_scale: float = 1.0
    process_noise_scale: float = 0.0
    passes: int = 1
    shuffle: bool = False
    seed: int = 0
    initial_mean: NDArray[np.float64] | None = None
    initial_cov: NDArray[np.float64] | None = None
    rmse_stride: int = DEFAULT_RMSE_STRIDE
    cov_stride: int | None = None

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise InvalidArgumentError(f"gamma must be positive, got {self.gamma}")
        if not self.v0_scale > 0:
            raise InvalidArgumentError(f"v0_scale must be positive, got {self.v0_scale}")
        if not self.process_noise_scale >= 0:
            raise InvalidArgumentError(f"process_noise_scale must be nonnegative, got {self.process_noise_scale}")
        if self.passes < 1:
            raise InvalidArgumentError(f"passes must be >= 1, got {self.passes}")
        if self.seed < 0:
            raise InvalidArgumentError(f"seed must be nonnegative, got {self.seed}")
        if self.rmse_stride < 1:
            raise InvalidArgumentError(f"rmse_stride must be >= 1, got {self.rmse_stride}")
        if self.cov_stride is not None and self.cov_stride < 1:
            raise InvalidArgumentError(f"cov_stride must be >= 1, got {self.cov_stride}")

    def initial_state(self, dim: int) -> PosteriorState:
        mean = np.zeros(dim) if self.initial_mean is None else np.asarray(self.initial_mean, dtype=np.float64)
        cov = self.v0_scale * np.eye(dim) if self.initial_cov is None else np.asarray(self.initial_cov)
        if mean.shape != (dim,) or cov.shape != (dim, dim):
            raise InvalidArgumentError(f"initial mean/covariance do not match dimension {dim}")
        return PosteriorState(mean=mean, cov=cov)

    def process_noise(self, dim: int) -> NDArray[np.float64] | None:
        if self.process_noise_scale == 0:
            return None
        return self.process_noise_scale * np.eye(dim)


class ScheduleKind(StrEnum):
    CONSTANT = "constant"
    POLYNOMIAL_DECAY = "polynomial-decay"
    RATIONAL_DECAY = "rational-decay"


@dataclass(frozen=True)
class ScheduleConfig:
    """Step sizes indexed by the zero-based global iteration t.

    constant: base; polynomial-decay: base / (t+1)^decay_exponent;
    rational-decay: alpha0 / (1 + alpha1·t).
    """

    kind: ScheduleKind = ScheduleKind.CONSTANT
    base: float = 1.0
    decay_exponent: float = 0.0
    alpha0: float = 1.0
    alpha1: float = 1e-4

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.kind is ScheduleKind.RATIONAL_DECAY:
            if not self.alpha0 > 0:
                raise InvalidArgumentError(f"alpha0 must be positive, got {self.alpha0}")
            if not self.alpha1 >= 0:
                raise InvalidArgumentError(f"alpha1 must be nonnegative, got {self.alpha1}")
        else:
            if not self.base > 0:
                raise InvalidArgumentError(f"base step must be positive, got {self.base}")
            if not self.decay_exponent >= 0:
                raise InvalidArgumentError(f"decay_exponent must be nonnegative, got {self.decay_exponent}")

    def step_size(self, t: int) -> float:
        match self.kind:
            case ScheduleKind.CONSTANT:
                step = self.base
            case ScheduleKind.POLYNOMIAL_DECAY:
                step = self.base / float(t + 1) ** self.decay_exponent
            case ScheduleKind.RATIONAL_DECAY:
                step = self.alpha0 / (1.0 + self.alpha1 * t)
        if not (step > 0 and np.isfinite(step)):
            raise InvalidArgumentError(f"schedule produced a nonpositive step {step!r} at iteration {t}")
        return step

    def with_leading_step(self, value: float) -> ScheduleConfig:
        """Same schedule with its first step set to ``value``."""
        if self.kind is ScheduleKind.RATIONAL_DECAY:
            return replace(self, alpha0=value)
        return replace(self, base=value)


@dataclass(frozen=True)
class TraceRecord:
    pass_index: int
    iteration: int
    rmse: float | None


@dataclass(frozen=True, eq=False)
class CovarianceSnapshot:
    iteration: int
    diagonal: NDArray[np.float64]
    min_eigenvalue: float


@dataclass(eq=False)
class Trace:
    """Per-iteration output of a solver run.

    ``final_state`` is only set for PIPG; the baselines carry no covariance.
    """

    solver: str
    records: list[TraceRecord] = field(default_factory=list)
    cov_snapshots: list[CovarianceSnapshot] = field(default_factory=list)
    final_mean: NDArray[np.float64] | None = None
    final_state: PosteriorState | None = None

    @property
    def final_rmse(self) -> float | None:
        return self.records[-1].rmse if self.records else None

    @property
    def initial_rmse(self) -> float | None:
        return self.records[0].rmse if self.records else None


def iterations_to_reach(trace: Trace, level: float) -> int | None:
    """First recorded iteration whose relative error is at most ``level``."""
    for record in trace.records:
        if record.rmse is not None and record.rmse <= level:
            return record.iteration
    return None


class _Recorder:
    def __init__(
        self,
        trace: Trace,
        ground_truth: ArrayLike | None,
        total: int,
        rmse_stride: int,
        cov_stride: int | None,
    ) -> None:
        self.trace = trace
        self.truth = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64)
        self.total = total
        self.rmse_stride = rmse_stride
        self.cov_stride = cov_stride

    def record(self, pass_index: int, iteration: int, mean: NDArray[np.float64], cov: NDArray | None = None) -> None:
        last = iteration == self.total
        if iteration % self.rmse_stride == 0 or last:
            rmse = None if self.truth is None else relative_error(mean, self.truth)
            self.trace.records.append(TraceRecord(pass_index=pass_index, iteration=iteration, rmse=rmse))
        if cov is not None and self.cov_stride is not None and (iteration % self.cov_stride == 0 or last):
            self.trace.cov_snapshots.append(
                CovarianceSnapshot(
                    iteration=iteration,
                    diagonal=np.diag(cov).copy(),
                    min_eigenvalue=min_eigenvalue(cov),
                )
            )


def _visit_order(
    count: int,
    passes: int,
    shuffle: bool,
    rng: np.random.Generator,
) -> Iterator[tuple[int, int, int]]:
    """Yield (pass_index, iteration, record index); iterations count from 1 across passes."""
    iteration = 0
    for pass_index in range(passes):
        order = rng.permutation(count) if shuffle else range(count)
        for index in order:
            iteration += 1
            yield pass_index, iteration, int(index)


def pipg_step_linear(
    state: PosteriorState,
    obs: Observation,
    reg: QuadraticRegularizer | ZeroRegularizer,
    cfg: SolverConfig,
) -> PosteriorState:
    """Exact Kalman step for a linear observation and a quadratic regularizer.

    One prediction through M = I - γ V AᵀA (no process noise) and one update
    along x_k.
    """
    m = transition_matrix(state.mean, state.cov, cfg.gamma, reg)
    predicted = predict(state, m)
    x = np.asarray(obs.regressor, dtype=np.float64)
    meas = MeasurementLinearization(
        direction=x,
        predicted_output=float(x @ predicted.mean),
        observed_output=obs.y,
        noise_precision=cfg.gamma,
    )
    return rank_one_update(predicted, meas)


def pipg_step_general(
    state: PosteriorState,
    obs: Observation,
    reg: Regularizer,
    cfg: SolverConfig,
    obs_model_factory: ObservationModelFactory = LinearObservation,
    iteration: int | None = None,
) -> PosteriorState:
    """EKF step: mean through the gradient-step map, covariance through its Jacobian.

    The observation model is linearized at the predicted mean θ̃.

    Raises:
        NumericInputError: If h_k(θ̃) or ∇h_k(θ̃) is not finite; the error carries
            ``iteration`` when given.
    """
    theta_pred = gradient_step_map(state.mean, state.cov, cfg.gamma, reg)
    m = transition_matrix(state.mean, state.cov, cfg.gamma, reg)
    predicted = predict(state, m, cfg.process_noise(state.dim), predicted_mean=theta_pred)

    model = obs_model_factory(np.asarray(obs.regressor, dtype=np.float64))
    output = model.value(predicted.mean)
    direction = np.asarray(model.gradient(predicted.mean), dtype=np.float64)
    if not (np.isfinite(output) and np.all(np.isfinite(direction))):
        where = "" if iteration is None else f" at iteration {iteration}"
        raise NumericInputError(f"observation model is not finite{where}", iteration=iteration)

    meas = MeasurementLinearization(
        direction=direction,
        predicted_output=output,
        observed_output=obs.y,
        noise_precision=cfg.gamma,
    )
    return rank_one_update(predicted, meas)


def _is_exact_case(obs_model_factory: ObservationModelFactory, reg: Regularizer) -> bool:
    return obs_model_factory is LinearObservation and isinstance(reg, QuadraticRegularizer | ZeroRegularizer)


def run_pipg(
    dataset: Dataset,
    obs_model_factory: ObservationModelFactory,
    reg: Regularizer,
    cfg: SolverConfig,
    ground_truth: ArrayLike | None = None,
) -> Trace:
    """Run PIPG over ``dataset`` for ``cfg.passes`` passes.

    Linear observations with a quadratic (or zero) regularizer take the exact
    Kalman path, where process noise does not apply; everything else takes the
    EKF path.

    Raises:
        SolverRunError: On any numeric failure, naming the pass and iteration.
    """
    if dataset.count == 0:
        raise InvalidArgumentError("dataset is empty")
    exact = _is_exact_case(obs_model_factory, reg)
    if exact and cfg.process_noise_scale > 0:
        logger.warning("Process noise q=%g is ignored on the exact linear-quadratic path", cfg.process_noise_scale)
    logger.debug("PIPG %s path, gamma=%g, passes=%d", "exact" if exact else "EKF", cfg.gamma, cfg.passes)

    total = cfg.passes * dataset.count
    cov_stride = cfg.cov_stride or max(1, dataset.count // COVARIANCE_SNAPSHOTS)
    trace = Trace(solver="pipg")
    recorder = _Recorder(trace, ground_truth, total, cfg.rmse_stride, cov_stride)
    state = cfg.initial_state(dataset.dimension)
    recorder.record(0, 0, state.mean, state.cov)

    rng = np.random.default_rng(cfg.seed)
    pass_index, iteration = 0, 0
    try:
        for pass_index, iteration, k in _visit_order(dataset.count, cfg.passes, cfg.shuffle, rng):
            obs = dataset[k]
            if exact:
                state = pipg_step_linear(state, obs, reg, cfg)  # type: ignore[arg-type]
            else:
                state = pipg_step_general(state, obs, reg, cfg, obs_model_factory, iteration=iteration)
            recorder.record(pass_index, iteration, state.mean, state.cov)
    except _NUMERIC_FAILURES as exc:
        raise SolverRunError("pipg", pass_index, iteration, exc) from exc

    trace.final_state = state
    trace.final_mean = state.mean
    return trace


def run_ipg(
    dataset: Dataset,
    reg: QuadraticRegularizer | ZeroRegularizer,
    schedule: ScheduleConfig,
    ground_truth: ArrayLike | None = None,
    *,
    passes: int = 1,
    shuffle: bool = False,
    seed: int = 0,
    initial_mean: ArrayLike | None = None,
    rmse_stride: int = DEFAULT_RMSE_STRIDE,
) -> Trace:
    """Incremental proximal gradient with identity metric.

    θ̃ = θ̄ - γ_t AᵀA θ̄, then θ̄ = prox_{γ_t f_k, I}(θ̃), the prox taken in closed
    form for the quadratic component loss.
    """
    if dataset.count == 0:
        raise InvalidArgumentError("dataset is empty")
    if passes < 1:
        raise InvalidArgumentError(f"passes must be >= 1, got {passes}")
    d = dataset.dimension
    identity = np.eye(d)
    theta = np.zeros(d) if initial_mean is None else np.asarray(initial_mean, dtype=np.float64).copy()

    trace = Trace(solver="ipg")
    recorder = _Recorder(trace, ground_truth, passes * dataset.count, rmse_stride, None)
    recorder.record(0, 0, theta)

    rng = np.random.default_rng(seed)
    pass_index, iteration = 0, 0
    try:
        for pass_index, iteration, k in _visit_order(dataset.count, passes, shuffle, rng):
            step = schedule.step_size(iteration - 1)
            theta_pred = gradient_step_map(theta, identity, step, reg)
            theta = prox_quadratic_metric(theta_pred, 1.0, dataset[k], step)
            if not np.all(np.isfinite(theta)):
                raise NumericInputError("iterate is not finite", iteration=iteration, pass_index=pass_index)
            recorder.record(pass_index, iteration, theta)
    except _NUMERIC_FAILURES as exc:
        raise SolverRunError("ipg", pass_index, iteration, exc) from exc

    trace.final_mean = theta
    return trace


def run_sgd(
    dataset: Dataset,
    obs_model_factory: ObservationModelFactory,
    reg: Regularizer,
    schedule: ScheduleConfig,
    ground_truth: ArrayLike | None = None,
    *,
    passes: int = 1,
    shuffle: bool = False,
    seed: int = 0,
    initial_mean: ArrayLike | None = None,
    rmse_stride: int = DEFAULT_RMSE_STRIDE,
) -> Trace:
    """Stochastic gradient descent on f_k + g.

    θ̄ ← θ̄ - γ_t (-(y_k - h_k(θ̄)) ∇h_k(θ̄) + ∇g(θ̄)).
    """
    if dataset.count == 0:
        raise InvalidArgumentError("dataset is empty")
    if passes < 1:
        raise InvalidArgumentError(f"passes must be >= 1, got {passes}")
    d = dataset.dimension
    theta = np.zeros(d) if initial_mean is None else np.asarray(initial_mean, dtype=np.float64).copy()

    trace = Trace(solver="sgd")
    recorder = _Recorder(trace, ground_truth, passes * dataset.count, rmse_stride, None)
    recorder.record(0, 0, theta)

    rng = np.random.default_rng(seed)
    pass_index, iteration = 0, 0
    try:
        for pass_index, iteration, k in _visit_order(dataset.count, passes, shuffle, rng):
            obs = dataset[k]
            model = obs_model_factory(obs.regressor)
            residual = obs.y - model.value(theta)
            grad = -residual * np.asarray(model.gradient(theta)) + np.asarray(reg.gradient(theta))
            if not (np.isfinite(residual) and np.all(np.isfinite(grad))):
                raise NumericInputError(
                    f"gradient is not finite at iteration {iteration}", iteration=iteration, pass_index=pass_index
                )
            theta = theta - schedule.step_size(iteration - 1) * grad
            recorder.record(pass_index, iteration, theta)
    except _NUMERIC_FAILURES as exc:
        raise SolverRunError("sgd", pass_index, iteration, exc) from exc

    trace.final_mean = theta
    return trace
