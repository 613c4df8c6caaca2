"""Regularizers g, observation models h_k, data records, and the metric prox.

The objective handled by the solvers is

    F(θ) = Σ_k ½ (y_k - h_k(θ))² + g(θ)

Regularizers expose value/gradient/Hessian of g, observation models expose
value/gradient of h_k. The two maps the PIPG prediction step needs,
the gradient-step map θ - γ V ∇g(θ) and its Jacobian I - γ V ∇²g(θ), live here
as well, next to the closed-form prox of a quadratic component loss.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from pipg.errors import IllConditionedError, InvalidArgumentError, NumericInputError


@dataclass(frozen=True, eq=False)
class Observation:
    """One data record (y_k, x_k)."""

    y: float
    regressor: NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered observations stored column-wise: ``targets[k]`` and ``regressors[k]``."""

    targets: NDArray[np.float64]
    regressors: NDArray[np.float64]

    def __post_init__(self) -> None:
        targets = np.asarray(self.targets, dtype=np.float64)
        regressors = np.asarray(self.regressors, dtype=np.float64)
        if targets.ndim != 1:
            raise InvalidArgumentError(f"targets must be a vector, got shape {targets.shape}")
        if regressors.ndim != 2 or regressors.shape[0] != targets.size:
            raise InvalidArgumentError(
                f"regressors must be a {targets.size}xd matrix, got shape {regressors.shape}"
            )
        if regressors.shape[1] < 1:
            raise InvalidArgumentError("regressors must have at least one column")
        if not (np.all(np.isfinite(targets)) and np.all(np.isfinite(regressors))):
            raise NumericInputError("dataset contains non-finite values")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "regressors", regressors)

    @property
    def count(self) -> int:
        return self.targets.size

    @property
    def dimension(self) -> int:
        return self.regressors.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, k: int) -> Observation:
        return Observation(y=float(self.targets[k]), regressor=self.regressors[k])

    def __iter__(self) -> Iterator[Observation]:
        for k in range(self.count):
            yield self[k]


class Regularizer(Protocol):
    """Twice-differentiable regularizer g."""

    def value(self, theta: NDArray[np.float64]) -> float: ...

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]: ...

    def hessian(self, theta: NDArray[np.float64]) -> NDArray[np.float64]: ...


@runtime_checkable
class DiagonalHessian(Protocol):
    """Regularizers whose Hessian is diagonal expose it as a vector."""

    def hessian_diagonal(self, theta: NDArray[np.float64]) -> NDArray[np.float64]: ...


class ObservationModel(Protocol):
    """Differentiable scalar observation map h_k."""

    def value(self, theta: NDArray[np.float64]) -> float: ...

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]: ...


@dataclass(frozen=True, eq=False)
class ZeroRegularizer:
    """g ≡ 0."""

    dim: int

    def value(self, theta: NDArray[np.float64]) -> float:
        return 0.0

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.zeros(self.dim)

    def hessian(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.zeros((self.dim, self.dim))

    def hessian_diagonal(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.zeros(self.dim)


@dataclass(frozen=True, eq=False)
class QuadraticRegularizer:
    """g(θ) = ½‖Aθ‖² for a known m×d matrix A."""

    a_matrix: NDArray[np.float64]
    _gram: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        a = np.atleast_2d(np.asarray(self.a_matrix, dtype=np.float64))
        if not np.all(np.isfinite(a)):
            raise NumericInputError("a_matrix contains non-finite values")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "_gram", a.T @ a)

    @classmethod
    def ridge(cls, lam: float, dim: int) -> QuadraticRegularizer:
        """A = √λ·I, so that g(θ) = λ/2 ‖θ‖²."""
        if lam < 0:
            raise InvalidArgumentError(f"ridge strength must be nonnegative, got {lam}")
        return cls(a_matrix=np.sqrt(lam) * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.a_matrix.shape[1]

    @property
    def gram(self) -> NDArray[np.float64]:
        """AᵀA."""
        return self._gram

    def value(self, theta: NDArray[np.float64]) -> float:
        residual = self.a_matrix @ theta
        return 0.5 * float(residual @ residual)

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.gram @ theta

    def hessian(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.gram.copy()


@dataclass(frozen=True, eq=False)
class SmoothedL2L1Regularizer:
    """g(θ) = λ Σ_i ((1 + θ_i²/δ²)^½ - 1), a smooth surrogate of λ‖θ‖₁/δ."""

    strength: float
    smoothing: float

    def __post_init__(self) -> None:
        if not self.strength > 0:
            raise InvalidArgumentError(f"strength must be positive, got {self.strength}")
        if not self.smoothing > 0:
            raise InvalidArgumentError(f"smoothing must be positive, got {self.smoothing}")

    def _ratio(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.square(np.asarray(theta, dtype=np.float64) / self.smoothing)

    def value(self, theta: NDArray[np.float64]) -> float:
        u = self._ratio(theta)
        # sqrt(1+u) - 1 written without cancellation for small u
        return self.strength * float(np.sum(u / (np.sqrt(1.0 + u) + 1.0)))

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        theta = np.asarray(theta, dtype=np.float64)
        return self.strength * theta / (self.smoothing**2 * np.sqrt(1.0 + self._ratio(theta)))

    def hessian_diagonal(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.strength / (self.smoothing**2 * (1.0 + self._ratio(theta)) ** 1.5)

    def hessian(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.diag(self.hessian_diagonal(theta))


def smoothed_l2l1_value(theta: ArrayLike, lam: float, delta: float) -> float:
    return SmoothedL2L1Regularizer(strength=lam, smoothing=delta).value(np.asarray(theta, dtype=np.float64))


def smoothed_l2l1_gradient(theta: ArrayLike, lam: float, delta: float) -> NDArray[np.float64]:
    return SmoothedL2L1Regularizer(strength=lam, smoothing=delta).gradient(np.asarray(theta, dtype=np.float64))


def smoothed_l2l1_hessian(theta: ArrayLike, lam: float, delta: float) -> NDArray[np.float64]:
    return SmoothedL2L1Regularizer(strength=lam, smoothing=delta).hessian(np.asarray(theta, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class LinearObservation:
    """h_k(θ) = x_kᵀθ, the quadratic component loss ½(y_k - x_kᵀθ)²."""

    regressor: NDArray[np.float64]

    def value(self, theta: NDArray[np.float64]) -> float:
        return float(self.regressor @ theta)

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.asarray(self.regressor, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SigmoidLinearObservation:
    """h_k(θ) = 1 / (1 + exp(-x_kᵀθ)), a saturating sensor."""

    regressor: NDArray[np.float64]

    def value(self, theta: NDArray[np.float64]) -> float:
        return float(expit(self.regressor @ theta))

    def gradient(self, theta: NDArray[np.float64]) -> NDArray[np.float64]:
        s = self.value(theta)
        return s * (1.0 - s) * np.asarray(self.regressor, dtype=np.float64)


def prox_quadratic_metric(
    anchor: ArrayLike,
    metric: ArrayLike | float,
    obs: Observation,
    gamma: float,
) -> NDArray[np.float64]:
    """Closed-form prox of γ·½(y - xᵀθ)² in the metric induced by V₀.

    Solves (V₀⁻¹ + γ x xᵀ) θ = V₀⁻¹ θ₀ + γ x y. A positive scalar ``metric`` stands
    for that multiple of the identity and is handled without a factorization.

    Args:
        anchor: θ₀.
        metric: SPD matrix V₀, or a positive scalar v meaning v·I.
        obs: Observation with a linear model.
        gamma: Positive weight of the component loss.

    Returns:
        The minimizer θ.

    Raises:
        IllConditionedError: If the metric is not SPD.
    """
    theta0 = np.asarray(anchor, dtype=np.float64)
    x = np.asarray(obs.regressor, dtype=np.float64)
    if x.shape != theta0.shape:
        raise InvalidArgumentError(f"regressor length {x.size} does not match anchor length {theta0.size}")
    if not gamma > 0:
        raise InvalidArgumentError(f"gamma must be positive, got {gamma}")

    if np.ndim(metric) == 0:
        scale = float(metric)  # type: ignore[arg-type]
        if not scale > 0:
            raise IllConditionedError(f"scalar metric must be positive, got {scale}")
        weight = gamma * scale
        return theta0 + weight * x * (obs.y - float(x @ theta0)) / (1.0 + weight * float(x @ x))

    v0 = np.asarray(metric, dtype=np.float64)
    if v0.shape != (theta0.size, theta0.size):
        raise InvalidArgumentError(f"metric must be {theta0.size}x{theta0.size}, got shape {v0.shape}")
    try:
        factor = scipy.linalg.cho_factor(v0)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("metric is not symmetric positive definite") from exc
    metric_inv = scipy.linalg.cho_solve(factor, np.eye(theta0.size))
    precision = metric_inv + gamma * np.outer(x, x)
    rhs = metric_inv @ theta0 + gamma * obs.y * x
    try:
        return scipy.linalg.solve(precision, rhs, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("prox system is singular") from exc


def gradient_step_map(
    theta: ArrayLike,
    metric: ArrayLike,
    gamma: float,
    reg: Regularizer,
) -> NDArray[np.float64]:
    """m_V(θ) = θ - γ V ∇g(θ)."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(metric, dtype=np.float64)
    if v.shape != (theta.size, theta.size):
        raise InvalidArgumentError(f"metric must be {theta.size}x{theta.size}, got shape {v.shape}")
    grad = np.asarray(reg.gradient(theta), dtype=np.float64)
    if grad.shape != theta.shape:
        raise InvalidArgumentError(f"regularizer gradient has shape {grad.shape}, expected {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericInputError("regularizer gradient is not finite")
    return theta - gamma * (v @ grad)


def transition_matrix(
    theta: ArrayLike,
    metric: ArrayLike,
    gamma: float,
    reg: Regularizer,
) -> NDArray[np.float64]:
    """M = I - γ V ∇²g(θ), the Jacobian of the gradient-step map."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(metric, dtype=np.float64)
    d = theta.size
    if v.shape != (d, d):
        raise InvalidArgumentError(f"metric must be {d}x{d}, got shape {v.shape}")
    if isinstance(reg, DiagonalHessian):
        scaled = v * reg.hessian_diagonal(theta)[np.newaxis, :]
    else:
        hess = np.asarray(reg.hessian(theta), dtype=np.float64)
        if hess.shape != (d, d):
            raise InvalidArgumentError(f"regularizer Hessian has shape {hess.shape}, expected {(d, d)}")
        scaled = v @ hess
    return np.eye(d) - gamma * scaled
