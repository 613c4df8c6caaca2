"""Brute-force references for the solvers.

These are deliberately direct: dense precision matrices, explicit products of
transition matrices, Newton iterations with finite-difference Hessians. They
only need to be right at small scale (d ≤ 8, n ≤ 100).
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from pipg.errors import IllConditionedError, InvalidArgumentError, NumericInputError, OracleFailureError
from pipg.models.models import Dataset, QuadraticRegularizer, ZeroRegularizer

logger = logging.getLogger(__name__)

ScalarFunction = Callable[[NDArray[np.float64]], float]
VectorFunction = Callable[[NDArray[np.float64]], NDArray[np.float64]]

# Step used for nested differences when no analytic gradient is available (≈ eps^(1/4)).
NESTED_DIFFERENCE_STEP = 1e-4


@dataclass(frozen=True, eq=False)
class OraclePosterior:
    mean: NDArray[np.float64]
    cov: NDArray[np.float64]


def _spd_inverse(matrix: NDArray[np.float64], what: str) -> NDArray[np.float64]:
    try:
        factor = scipy.linalg.cho_factor(matrix)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError(f"{what} is not symmetric positive definite") from exc
    inverse = scipy.linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


def _gaussian_posterior(
    prior_mean: NDArray[np.float64],
    prior_cov: NDArray[np.float64],
    design: NDArray[np.float64],
    targets: NDArray[np.float64],
    gamma: float,
) -> OraclePosterior:
    prior_precision = _spd_inverse(prior_cov, "prior covariance")
    precision = prior_precision + gamma * design.T @ design
    cov = _spd_inverse(precision, "posterior precision")
    mean = cov @ (prior_precision @ prior_mean + gamma * design.T @ targets)
    return OraclePosterior(mean=mean, cov=cov)


def _check_prior(prior_mean: ArrayLike, prior_cov: ArrayLike, dataset: Dataset) -> tuple[NDArray, NDArray]:
    mean = np.asarray(prior_mean, dtype=np.float64)
    cov = np.asarray(prior_cov, dtype=np.float64)
    d = dataset.dimension
    if mean.shape != (d,) or cov.shape != (d, d):
        raise InvalidArgumentError(f"prior does not match dataset dimension {d}")
    return mean, cov


def batch_posterior(
    prior_mean: ArrayLike,
    prior_cov: ArrayLike,
    dataset: Dataset,
    gamma: float,
) -> OraclePosterior:
    """Posterior of θ under y_k ~ N(x_kᵀθ, 1/γ) and a Gaussian prior, in precision form."""
    mean, cov = _check_prior(prior_mean, prior_cov, dataset)
    if dataset.count == 0:
        return OraclePosterior(mean=mean.copy(), cov=cov.copy())
    return _gaussian_posterior(mean, cov, dataset.regressors, dataset.targets, gamma)


def state_space_posterior(
    prior_mean: ArrayLike,
    prior_cov: ArrayLike,
    dataset: Dataset,
    gamma: float,
    reg: QuadraticRegularizer | ZeroRegularizer,
) -> OraclePosterior:
    """Posterior of θ_n in the model θ_k = M_k θ_{k-1}, y_k ~ N(x_kᵀθ_k, 1/γ).

    M_k = I - γ V_{k-1} AᵀA depends on the filter's own covariance sequence, which
    is replayed here to build the matrices. The posterior itself is computed
    without filtering: every observation is rewritten as a row x_kᵀΦ_k acting on
    θ₀ (Φ_k = M_k⋯M_1), the batch posterior of θ₀ is formed, and pushed through Φ_n.
    """
    mean0, cov0 = _check_prior(prior_mean, prior_cov, dataset)
    d = dataset.dimension
    gram = reg.gram if isinstance(reg, QuadraticRegularizer) else np.zeros((d, d))
    identity = np.eye(d)

    cov = cov0.copy()
    propagator = identity.copy()
    rows = np.empty_like(dataset.regressors)
    for k in range(dataset.count):
        x = dataset.regressors[k]
        transition = identity - gamma * cov @ gram
        propagator = transition @ propagator
        rows[k] = x @ propagator
        cov_pred = transition @ cov @ transition.T
        spread = cov_pred @ x
        cov = cov_pred - np.outer(spread, spread) / (1.0 / gamma + x @ spread)
        cov = 0.5 * (cov + cov.T)

    if dataset.count == 0:
        return OraclePosterior(mean=mean0.copy(), cov=cov0.copy())
    initial = _gaussian_posterior(mean0, cov0, rows, dataset.targets, gamma)
    final_cov = propagator @ initial.cov @ propagator.T
    return OraclePosterior(mean=propagator @ initial.mean, cov=0.5 * (final_cov + final_cov.T))


def ridge_solution(dataset: Dataset, reg: QuadraticRegularizer | ZeroRegularizer) -> NDArray[np.float64]:
    """argmin_θ Σ_k ½(y_k - x_kᵀθ)² + ½‖Aθ‖²."""
    x = dataset.regressors
    d = dataset.dimension
    gram = reg.gram if isinstance(reg, QuadraticRegularizer) else np.zeros((d, d))
    try:
        return scipy.linalg.solve(x.T @ x + gram, x.T @ dataset.targets, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("normal equations are singular") from exc


def finite_difference_gradient(fn: ScalarFunction, theta: ArrayLike, step: float = 1e-6) -> NDArray[np.float64]:
    """Central differences of a scalar function."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        offset = np.zeros_like(theta)
        offset[i] = step
        upper, lower = fn(theta + offset), fn(theta - offset)
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericInputError(f"function is not finite near coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * step)
    return grad


def finite_difference_jacobian(fn: VectorFunction, theta: ArrayLike, step: float = 1e-6) -> NDArray[np.float64]:
    """Central differences of a vector function; column i is ∂fn/∂θ_i."""
    theta = np.asarray(theta, dtype=np.float64)
    columns = []
    for i in range(theta.size):
        offset = np.zeros_like(theta)
        offset[i] = step
        upper = np.asarray(fn(theta + offset), dtype=np.float64)
        lower = np.asarray(fn(theta - offset), dtype=np.float64)
        if not (np.all(np.isfinite(upper)) and np.all(np.isfinite(lower))):
            raise NumericInputError(f"function is not finite near coordinate {i}")
        columns.append((upper - lower) / (2.0 * step))
    return np.column_stack(columns)


def finite_difference_hessian(
    fn: ScalarFunction,
    theta: ArrayLike,
    step: float = 1e-6,
    gradient: VectorFunction | None = None,
) -> NDArray[np.float64]:
    """Symmetrized Jacobian of the gradient.

    With ``gradient`` given, its central differences are taken at ``step``.
    Without it the gradient is itself a central difference of ``fn``, and both
    levels use at least ``NESTED_DIFFERENCE_STEP``, since nested differences at
    1e-6 lose about ten digits.
    """
    if gradient is None:
        nested = max(step, NESTED_DIFFERENCE_STEP)

        def gradient(point: NDArray[np.float64]) -> NDArray[np.float64]:
            return finite_difference_gradient(fn, point, nested)

        step = nested
    jac = finite_difference_jacobian(gradient, theta, step)
    return 0.5 * (jac + jac.T)


def numeric_prox(
    anchor: ArrayLike,
    metric: ArrayLike,
    loss: ScalarFunction,
    gamma: float,
    *,
    loss_gradient: VectorFunction | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> NDArray[np.float64]:
    """argmin_θ γ·loss(θ) + ½(θ - anchor)ᵀ metric⁻¹ (θ - anchor) by damped Newton.

    Args:
        anchor: θ₀.
        metric: SPD matrix V₀.
        loss: Smooth scalar loss.
        gamma: Positive weight of the loss.
        loss_gradient: Analytic gradient of ``loss``; finite differences otherwise.
        tol: Stop once the objective's gradient norm is below ``tol``, or the Newton
            step is below ``tol`` relative to the iterate.
        max_iter: Newton iteration budget.

    Raises:
        OracleFailureError: If the budget runs out first.
    """
    theta0 = np.asarray(anchor, dtype=np.float64)
    metric_inv = _spd_inverse(np.asarray(metric, dtype=np.float64), "metric")
    loss_grad = loss_gradient or (lambda point: finite_difference_gradient(loss, point))

    def objective(theta: NDArray[np.float64]) -> float:
        delta = theta - theta0
        return gamma * loss(theta) + 0.5 * float(delta @ metric_inv @ delta)

    def objective_gradient(theta: NDArray[np.float64]) -> NDArray[np.float64]:
        return gamma * np.asarray(loss_grad(theta), dtype=np.float64) + metric_inv @ (theta - theta0)

    theta = theta0.copy()
    for iteration in range(max_iter):
        grad = objective_gradient(theta)
        if np.linalg.norm(grad) < tol:
            return theta
        hessian = gamma * finite_difference_jacobian(loss_grad, theta, NESTED_DIFFERENCE_STEP) + metric_inv
        hessian = 0.5 * (hessian + hessian.T)
        try:
            direction = -scipy.linalg.solve(hessian, grad, assume_a="sym")
        except np.linalg.LinAlgError:
            direction = -grad
        current = objective(theta)
        slope = float(grad @ direction)
        if slope >= 0:
            direction, slope = -grad, -float(grad @ grad)
        t = 1.0
        while objective(theta + t * direction) > current + 1e-4 * t * slope and t > 1e-12:
            t *= 0.5
        theta = theta + t * direction
        if t * np.linalg.norm(direction) <= tol * (1.0 + np.linalg.norm(theta)):
            logger.debug("numeric_prox stopped on step size after %d iterations", iteration + 1)
            return theta
    raise OracleFailureError(f"numeric_prox did not converge within {max_iter} iterations")
