"""Prediction and rank-one measurement-update kernels for dense Gaussian posteriors.

All PIPG variants reduce to the same two steps on a ``(mean, cov)`` pair:

    predict:  mean' = M mean          cov' = M cov Mᵀ + Q
    update:   s     = 1/γ + dᵀ cov d
              mean' = mean + cov d (y - ŷ) / s
              cov'  = cov - (cov d)(cov d)ᵀ / s

The kernels never mutate their inputs and re-symmetrize the covariance after
every step, since rank-one downdates drift out of symmetry over long runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from pipg.errors import InternalInvariantError, InvalidArgumentError, NumericInputError

# Smallest admissible innovation variance.
MIN_INNOVATION_VARIANCE = 1e-300


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Mean vector and covariance matrix of a Gaussian posterior (θ̄, V).

    Predicted pairs (θ̃, Ṽ) use the same type.
    """

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1:
            raise InvalidArgumentError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise InvalidArgumentError(f"cov must be {mean.size}x{mean.size}, got shape {cov.shape}")
        if not np.all(np.isfinite(mean)):
            raise NumericInputError("mean contains non-finite values")
        if not np.all(np.isfinite(cov)):
            raise NumericInputError("cov contains non-finite values")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def isotropic(cls, dim: int, scale: float, mean: ArrayLike | None = None) -> PosteriorState:
        """Build a state with covariance ``scale * I``, centred at ``mean`` (zero by default)."""
        if dim < 1:
            raise InvalidArgumentError(f"dim must be >= 1, got {dim}")
        if scale <= 0:
            raise InvalidArgumentError(f"scale must be positive, got {scale}")
        centre = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
        return cls(mean=centre, cov=scale * np.eye(dim))


@dataclass(frozen=True, eq=False)
class MeasurementLinearization:
    """One scalar measurement, linearized around the predicted mean.

    ``direction`` is x_k for linear observations and ∇h_k(θ̃) for nonlinear ones.
    """

    direction: NDArray[np.float64]
    predicted_output: float
    observed_output: float
    noise_precision: float

    def __post_init__(self) -> None:
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.ndim != 1:
            raise InvalidArgumentError(f"direction must be a vector, got shape {direction.shape}")
        if not self.noise_precision > 0:
            raise InvalidArgumentError(f"noise_precision must be positive, got {self.noise_precision}")
        if not (
            np.all(np.isfinite(direction))
            and np.isfinite(self.predicted_output)
            and np.isfinite(self.observed_output)
            and np.isfinite(self.noise_precision)
        ):
            raise NumericInputError("measurement contains non-finite values")
        object.__setattr__(self, "direction", direction)

    @property
    def residual(self) -> float:
        return float(self.observed_output - self.predicted_output)


def symmetrize(cov: ArrayLike) -> NDArray[np.float64]:
    """Return ``(M + Mᵀ) / 2``.

    Raises:
        InvalidArgumentError: If ``cov`` is not a square matrix.
    """
    matrix = np.asarray(cov, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {matrix.shape}")
    return 0.5 * (matrix + matrix.T)


def predict(
    state: PosteriorState,
    transition: ArrayLike,
    process_noise: ArrayLike | None = None,
    predicted_mean: ArrayLike | None = None,
) -> PosteriorState:
    """Propagate a posterior through a linear(ized) transition.

    Args:
        state: Current posterior (θ̄, V).
        transition: d×d transition matrix M.
        process_noise: d×d symmetric PSD matrix Q; ``None`` means zero.
        predicted_mean: Already-propagated mean. Used by the general path, where
            the mean goes through the nonlinear gradient-step map and ``transition``
            only linearizes the covariance propagation.

    Returns:
        The predicted posterior (θ̃, Ṽ) with Ṽ = M V Mᵀ + Q.

    Raises:
        InvalidArgumentError: On dimension mismatch.
        NumericInputError: On non-finite inputs.
    """
    d = state.dim
    m = np.asarray(transition, dtype=np.float64)
    if m.shape != (d, d):
        raise InvalidArgumentError(f"transition must be {d}x{d}, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericInputError("transition contains non-finite values")

    cov = m @ state.cov @ m.T
    if process_noise is not None:
        q = np.asarray(process_noise, dtype=np.float64)
        if q.shape != (d, d):
            raise InvalidArgumentError(f"process_noise must be {d}x{d}, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise NumericInputError("process_noise contains non-finite values")
        cov = cov + q

    if predicted_mean is None:
        mean = m @ state.mean
    else:
        mean = np.asarray(predicted_mean, dtype=np.float64)
        if mean.shape != (d,):
            raise InvalidArgumentError(f"predicted_mean must have length {d}, got shape {mean.shape}")

    return PosteriorState(mean=mean, cov=symmetrize(cov))


def rank_one_update(state: PosteriorState, meas: MeasurementLinearization) -> PosteriorState:
    """Condition a posterior on one scalar measurement.

    Raises:
        InvalidArgumentError: If the measurement direction has the wrong length.
        InternalInvariantError: If the innovation variance is not positive.
    """
    if meas.direction.size != state.dim:
        raise InvalidArgumentError(
            f"measurement direction has length {meas.direction.size}, state has dimension {state.dim}"
        )
    cov_dir = state.cov @ meas.direction
    innovation_variance = 1.0 / meas.noise_precision + float(meas.direction @ cov_dir)
    if not innovation_variance > MIN_INNOVATION_VARIANCE:
        raise InternalInvariantError(f"innovation variance {innovation_variance!r} is not positive")

    gain = cov_dir / innovation_variance
    mean = state.mean + gain * meas.residual
    cov = state.cov - np.outer(cov_dir, gain)
    return PosteriorState(mean=mean, cov=symmetrize(cov))


def min_eigenvalue(cov: ArrayLike) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(np.linalg.eigvalsh(symmetrize(cov))[0])
