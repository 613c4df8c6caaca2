"""Tests for regularizers, observation models, the metric prox and the gradient-step map."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pipg.errors import IllConditionedError, InvalidArgumentError, NumericInputError
from pipg.kalman_core.kalman_core import MeasurementLinearization, PosteriorState, rank_one_update
from pipg.models.models import (
    Dataset,
    DiagonalHessian,
    LinearObservation,
    Observation,
    QuadraticRegularizer,
    SigmoidLinearObservation,
    SmoothedL2L1Regularizer,
    ZeroRegularizer,
    gradient_step_map,
    prox_quadratic_metric,
    smoothed_l2l1_gradient,
    smoothed_l2l1_hessian,
    smoothed_l2l1_value,
    transition_matrix,
)
from pipg.oracle.oracle import finite_difference_gradient, finite_difference_jacobian


def _relative(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


class TestDataset:
    """Tests for the Dataset container."""

    def test_indexing_and_iteration(self):
        data = Dataset(targets=[1.0, 2.0], regressors=[[1.0, 0.0], [0.0, 1.0]])
        assert len(data) == 2
        assert data.dimension == 2
        assert data[1].y == 2.0
        assert_array_equal(data[1].regressor, [0.0, 1.0])
        assert [obs.y for obs in data] == [1.0, 2.0]

    def test_row_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(targets=[1.0, 2.0], regressors=[[1.0, 0.0]])

    def test_non_finite_rejected(self):
        with pytest.raises(NumericInputError):
            Dataset(targets=[np.inf], regressors=[[1.0]])


class TestProxQuadraticMetric:
    """Tests for the closed-form metric prox."""

    def test_zero_residual_returns_anchor(self):
        rng = np.random.default_rng(0)
        theta0 = rng.standard_normal(3)
        x = rng.standard_normal(3)
        result = prox_quadratic_metric(theta0, np.eye(3), Observation(float(x @ theta0), x), 0.5)
        assert_allclose(result, theta0, atol=1e-14)

    def test_scalar_cases(self):
        assert_allclose(prox_quadratic_metric([0.0], [[1.0]], Observation(0.0, np.array([1.0])), 1.0), [0.0])
        assert_allclose(prox_quadratic_metric([0.0], [[1.0]], Observation(1.0, np.array([1.0])), 1.0), [0.5])

    def test_scalar_metric_matches_matrix_metric(self):
        rng = np.random.default_rng(1)
        theta0 = rng.standard_normal(4)
        obs = Observation(0.3, rng.standard_normal(4))
        assert_allclose(
            prox_quadratic_metric(theta0, 2.5, obs, 0.4),
            prox_quadratic_metric(theta0, 2.5 * np.eye(4), obs, 0.4),
            rtol=1e-12,
        )

    def test_equals_kalman_update(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            d = 3
            b = rng.standard_normal((d, d))
            metric = b @ b.T + 0.5 * np.eye(d)
            metric = 0.5 * (metric + metric.T)
            theta0 = rng.standard_normal(d)
            x = rng.standard_normal(d)
            y = float(rng.standard_normal())
            gamma = float(rng.uniform(0.1, 5.0))
            prox = prox_quadratic_metric(theta0, metric, Observation(y, x), gamma)
            kalman = rank_one_update(
                PosteriorState(mean=theta0, cov=metric),
                MeasurementLinearization(
                    direction=x,
                    predicted_output=float(x @ theta0),
                    observed_output=y,
                    noise_precision=gamma,
                ),
            )
            assert_allclose(prox, kalman.mean, rtol=1e-10, atol=1e-10)

    def test_singular_metric(self):
        with pytest.raises(IllConditionedError):
            prox_quadratic_metric(np.zeros(2), np.diag([1.0, 0.0]), Observation(1.0, np.ones(2)), 1.0)
        with pytest.raises(IllConditionedError):
            prox_quadratic_metric(np.zeros(2), 0.0, Observation(1.0, np.ones(2)), 1.0)


class TestQuadraticRegularizer:
    """Tests for g(θ) = ½‖Aθ‖²."""

    def test_ridge_values(self):
        reg = QuadraticRegularizer.ridge(0.5, 3)
        theta = np.array([1.0, -2.0, 2.0])
        assert reg.value(theta) == pytest.approx(0.25 * 9.0)
        assert_allclose(reg.gradient(theta), 0.5 * theta)
        assert_allclose(reg.hessian(theta), 0.5 * np.eye(3))

    def test_general_matrix(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 4))
        reg = QuadraticRegularizer(a)
        theta = rng.standard_normal(4)
        assert reg.dim == 4
        assert_allclose(reg.gradient(theta), finite_difference_gradient(reg.value, theta), rtol=1e-6, atol=1e-8)
        assert_allclose(reg.gram, a.T @ a)

    def test_negative_ridge_rejected(self):
        with pytest.raises(InvalidArgumentError):
            QuadraticRegularizer.ridge(-1.0, 2)


class TestSmoothedL2L1:
    """Tests for the smoothed ℓ2-ℓ1 regularizer."""

    def test_origin(self):
        reg = SmoothedL2L1Regularizer(strength=1e-5, smoothing=0.1)
        assert reg.value(np.zeros(4)) == 0.0
        assert_array_equal(reg.gradient(np.zeros(4)), np.zeros(4))

    def test_value_at_delta(self):
        lam, delta = 0.3, 0.1
        assert smoothed_l2l1_value([delta], lam, delta) == pytest.approx(lam * (np.sqrt(2.0) - 1.0), rel=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        lam, delta = 1e-5, 0.1
        for _ in range(100):
            theta = rng.uniform(-0.5, 0.5, size=5)
            fd = finite_difference_gradient(lambda t: smoothed_l2l1_value(t, lam, delta), theta)
            assert _relative(fd, smoothed_l2l1_gradient(theta, lam, delta)) < 1e-5

    def test_hessian_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        lam, delta = 1e-5, 0.1
        for _ in range(100):
            theta = rng.uniform(-0.5, 0.5, size=5)
            fd = finite_difference_jacobian(lambda t: smoothed_l2l1_gradient(t, lam, delta), theta)
            assert _relative(fd, smoothed_l2l1_hessian(theta, lam, delta)) < 1e-4

    def test_hessian_at_origin(self):
        reg = SmoothedL2L1Regularizer(strength=2.0, smoothing=0.5)
        assert_allclose(reg.hessian(np.zeros(3)), 8.0 * np.eye(3))
        assert isinstance(reg, DiagonalHessian)

    def test_zero_smoothing_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SmoothedL2L1Regularizer(strength=1.0, smoothing=0.0)
        with pytest.raises(InvalidArgumentError):
            smoothed_l2l1_value([1.0], 1.0, 0.0)


class TestObservationModels:
    """Tests for the linear and sigmoid observation maps."""

    def test_linear(self):
        model = LinearObservation(np.array([1.0, 2.0]))
        assert model.value(np.array([3.0, -1.0])) == 1.0
        assert_array_equal(model.gradient(np.zeros(2)), [1.0, 2.0])

    def test_sigmoid_at_origin(self):
        x = np.array([0.4, -1.2, 2.0])
        model = SigmoidLinearObservation(x)
        assert model.value(np.zeros(3)) == 0.5
        assert_allclose(model.gradient(np.zeros(3)), 0.25 * x)

    def test_sigmoid_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            x = rng.standard_normal(5)
            theta = rng.uniform(-1.0, 1.0, size=5)
            model = SigmoidLinearObservation(x)
            fd = finite_difference_gradient(model.value, theta)
            assert _relative(fd, model.gradient(theta)) < 1e-5

    def test_sigmoid_saturates(self):
        x = np.array([1.0, 1.0])
        model = SigmoidLinearObservation(x)
        norms = [np.linalg.norm(model.gradient(np.array([t, t]))) for t in (1.0, 5.0, 20.0, 400.0)]
        assert norms == sorted(norms, reverse=True)
        assert norms[-1] < 1e-300
        assert model.value(np.array([400.0, 400.0])) == 1.0


class TestGradientStepMap:
    """Tests for m_V(θ) = θ - γV∇g(θ)."""

    def test_zero_regularizer(self):
        theta = np.array([1.0, -2.0])
        assert_array_equal(gradient_step_map(theta, np.eye(2), 0.3, ZeroRegularizer(2)), theta)

    def test_ridge_shrinks(self):
        gamma, lam = 0.1, 0.01
        theta = np.array([1.0, 2.0, -3.0])
        result = gradient_step_map(theta, np.eye(3), gamma, QuadraticRegularizer.ridge(lam, 3))
        assert_allclose(result, (1.0 - gamma * lam) * theta, rtol=1e-15)

    def test_matches_explicit_product(self):
        rng = np.random.default_rng(7)
        theta = rng.standard_normal(4)
        metric = np.cov(rng.standard_normal((4, 10)))
        reg = SmoothedL2L1Regularizer(strength=0.2, smoothing=0.3)
        expected = theta - 0.7 * metric @ reg.gradient(theta)
        assert_allclose(gradient_step_map(theta, metric, 0.7, reg), expected, rtol=1e-12, atol=1e-12)

    def test_non_finite_gradient(self):
        class Exploding:
            def gradient(self, theta):
                return np.full(theta.shape, np.nan)

        with pytest.raises(NumericInputError):
            gradient_step_map(np.zeros(2), np.eye(2), 1.0, Exploding())


class TestTransitionMatrix:
    """Tests for M = I - γV∇²g(θ)."""

    def test_zero_regularizer(self):
        assert_array_equal(transition_matrix(np.ones(3), np.eye(3), 0.5, ZeroRegularizer(3)), np.eye(3))

    def test_ridge(self):
        m = transition_matrix(np.zeros(2), np.eye(2), 0.1, QuadraticRegularizer.ridge(0.01, 2))
        assert_allclose(m, 0.999 * np.eye(2), rtol=1e-15)

    def test_smoothed_at_origin(self):
        gamma, lam, delta = 0.5, 1e-3, 0.1
        m = transition_matrix(np.zeros(3), np.eye(3), gamma, SmoothedL2L1Regularizer(lam, delta))
        assert_allclose(m, (1.0 - gamma * lam / delta**2) * np.eye(3), rtol=1e-14)

    def test_diagonal_path_matches_dense_product(self):
        rng = np.random.default_rng(8)
        theta = rng.standard_normal(4)
        metric = np.cov(rng.standard_normal((4, 10)))
        reg = SmoothedL2L1Regularizer(strength=0.2, smoothing=0.3)
        expected = np.eye(4) - 0.4 * metric @ reg.hessian(theta)
        assert_allclose(transition_matrix(theta, metric, 0.4, reg), expected, rtol=1e-12, atol=1e-14)

    def test_is_jacobian_of_gradient_step_map(self):
        rng = np.random.default_rng(9)
        theta = rng.uniform(-0.3, 0.3, size=3)
        metric = np.diag([1.0, 2.0, 0.5])
        reg = SmoothedL2L1Regularizer(strength=1e-3, smoothing=0.1)
        fd = finite_difference_jacobian(lambda t: gradient_step_map(t, metric, 1.0, reg), theta)
        assert_allclose(transition_matrix(theta, metric, 1.0, reg), fd, atol=1e-7)
