"""Tests for the synthetic problem generators and dataset files."""

from __future__ import annotations

import logging

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from pipg.datagen.datagen import (
    DATASET_FILE,
    GROUND_TRUTH_FILE,
    ARGenConfig,
    RidgeGenConfig,
    ar1_signal,
    circulant_regressors,
    export_problem,
    generate_ridge,
    generate_sparse_nonlinear,
    load_dataset,
    relative_error,
)
from pipg.errors import DatasetParseError, InvalidArgumentError


def _lag_one_autocorrelation(signal: np.ndarray) -> float:
    centred = signal - signal.mean()
    return float(centred[1:] @ centred[:-1] / (centred @ centred))


class TestGenerateRidge:
    """Tests for the linear-Gaussian generator."""

    def test_deterministic_per_seed(self):
        first = generate_ridge(RidgeGenConfig(dimension=5, count=100, seed=7))
        second = generate_ridge(RidgeGenConfig(dimension=5, count=100, seed=7))
        assert_array_equal(first.dataset.regressors, second.dataset.regressors)
        assert_array_equal(first.dataset.targets, second.dataset.targets)
        assert_array_equal(first.ground_truth, second.ground_truth)

    def test_seeds_differ(self):
        first = generate_ridge(RidgeGenConfig(dimension=5, count=100, seed=1))
        second = generate_ridge(RidgeGenConfig(dimension=5, count=100, seed=2))
        assert not np.array_equal(first.dataset.targets, second.dataset.targets)

    def test_noiseless_limit(self):
        problem = generate_ridge(RidgeGenConfig(dimension=4, count=500, noise_variance=1e-12, seed=3))
        residuals = problem.dataset.targets - problem.dataset.regressors @ problem.ground_truth
        assert np.var(residuals) < 1e-10

    def test_least_squares_recovers_truth(self):
        problem = generate_ridge(RidgeGenConfig(dimension=5, count=2000, seed=4))
        estimate, *_ = np.linalg.lstsq(problem.dataset.regressors, problem.dataset.targets, rcond=None)
        assert relative_error(estimate, problem.ground_truth) < 0.15

    def test_metadata(self):
        problem = generate_ridge(RidgeGenConfig(dimension=3, count=10, seed=5))
        assert problem.metadata["generator"] == "ridge"
        assert problem.metadata["seed"] == 5

    def test_invalid_config(self):
        with pytest.raises(InvalidArgumentError):
            RidgeGenConfig(dimension=0, count=10)
        with pytest.raises(InvalidArgumentError):
            RidgeGenConfig(dimension=2, count=10, noise_variance=0.0)


class TestSparseNonlinear:
    """Tests for the AR(1)-driven sigmoid generator."""

    def test_default_sparsity(self):
        problem = generate_sparse_nonlinear(ARGenConfig(dimension=50, count=200, seed=0))
        assert np.count_nonzero(problem.ground_truth) == 5

    def test_explicit_sparsity(self):
        problem = generate_sparse_nonlinear(ARGenConfig(dimension=10, count=200, sparsity=3, seed=1))
        assert np.count_nonzero(problem.ground_truth) == 3

    def test_small_dimension_keeps_one_tap(self):
        assert ARGenConfig(dimension=5, count=10).sparsity == 1

    def test_deterministic_per_seed(self):
        cfg = ARGenConfig(dimension=8, count=300, seed=11)
        first, second = generate_sparse_nonlinear(cfg), generate_sparse_nonlinear(cfg)
        assert_array_equal(first.dataset.targets, second.dataset.targets)
        assert_array_equal(first.ground_truth, second.ground_truth)

    def test_invalid_config(self):
        with pytest.raises(InvalidArgumentError):
            ARGenConfig(dimension=10, count=100, ar_coefficient=1.0)
        with pytest.raises(InvalidArgumentError):
            ARGenConfig(dimension=10, count=100, sparsity=11)


class TestAR1Signal:
    """Tests for the AR(1) input and its circulant regressors."""

    def test_white_noise_has_no_autocorrelation(self):
        signal = ar1_signal(20000, 0.0, np.random.default_rng(0))
        assert abs(_lag_one_autocorrelation(signal)) < 0.05

    def test_autocorrelation_matches_coefficient(self):
        signal = ar1_signal(20000, 0.8, np.random.default_rng(1))
        assert 0.75 <= _lag_one_autocorrelation(signal) <= 0.85

    def test_follows_recursion(self):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal()
        innovations = rng.standard_normal(50)
        signal = ar1_signal(50, 0.6, np.random.default_rng(2))
        expected = np.empty(50)
        previous = x0
        for k in range(50):
            previous = 0.6 * previous + innovations[k]
            expected[k] = previous
        np.testing.assert_allclose(signal, expected, rtol=1e-12)

    def test_circulant_rows(self):
        signal = np.arange(6, dtype=np.float64)
        rows = circulant_regressors(signal, 3)
        assert rows.shape == (6, 3)
        assert_array_equal(rows[0], [4.0, 5.0, 0.0])
        assert_array_equal(rows[4], [2.0, 3.0, 4.0])

    def test_each_sample_used_dimension_times(self):
        signal = np.random.default_rng(3).standard_normal(40)
        rows = circulant_regressors(signal, 7)
        values, counts = np.unique(rows, return_counts=True)
        assert values.size == 40
        assert np.all(counts == 7)


class TestRelativeError:
    """Tests for E = ‖estimate - truth‖ / ‖truth‖."""

    def test_examples(self):
        truth = np.array([3.0, -4.0])
        assert relative_error(truth, truth) == 0.0
        assert relative_error(np.zeros(2), truth) == 1.0
        assert relative_error(2.0 * truth, truth) == 1.0

    def test_zero_truth(self):
        with pytest.raises(InvalidArgumentError):
            relative_error(np.ones(2), np.zeros(2))

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            relative_error(np.ones(3), np.ones(2))


class TestDatasetFiles:
    """Tests for CSV export and reload."""

    def test_round_trip_is_exact(self, tmp_path):
        problem = generate_sparse_nonlinear(ARGenConfig(dimension=6, count=50, seed=9))
        dataset_path, truth_path = export_problem(problem, tmp_path)
        assert dataset_path.name == DATASET_FILE
        assert truth_path.name == GROUND_TRUTH_FILE
        dataset, truth = load_dataset(dataset_path)
        assert_array_equal(dataset.targets, problem.dataset.targets)
        assert_array_equal(dataset.regressors, problem.dataset.regressors)
        assert_array_equal(truth, problem.ground_truth)

    def test_header(self, tmp_path):
        problem = generate_ridge(RidgeGenConfig(dimension=3, count=2, seed=0))
        dataset_path, _ = export_problem(problem, tmp_path)
        assert dataset_path.read_text().splitlines()[0] == "y,x_1,x_2,x_3"

    def test_missing_sidecar_warns(self, tmp_path, caplog):
        path = tmp_path / DATASET_FILE
        path.write_text("y,x_1\n1.0,2.0\n")
        with caplog.at_level(logging.WARNING, logger="pipg.datagen.datagen"):
            dataset, truth = load_dataset(path)
        assert truth is None
        assert dataset.count == 1
        assert "No ground truth" in caplog.text

    def test_malformed_row_reports_row_number(self, tmp_path):
        path = tmp_path / DATASET_FILE
        path.write_text("y,x_1,x_2\n1.0,2.0,3.0\n1.0,abc,3.0\n")
        with pytest.raises(DatasetParseError) as excinfo:
            load_dataset(path)
        assert excinfo.value.row == 3
        assert "row 3" in str(excinfo.value)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / DATASET_FILE
        path.write_text("y,x_1,x_2\n1.0,2.0\n")
        with pytest.raises(DatasetParseError) as excinfo:
            load_dataset(path)
        assert excinfo.value.row == 2

    def test_bad_header(self, tmp_path):
        path = tmp_path / DATASET_FILE
        path.write_text("target,a,b\n1.0,2.0,3.0\n")
        with pytest.raises(DatasetParseError) as excinfo:
            load_dataset(path)
        assert excinfo.value.row == 1

    @pytest.mark.parametrize(
        ("sidecar", "row"),
        [("0.5\nabc\n", 2), ("0.5\nnan\n", 2), ("0.0\n0.0\n", 1), ("0.5\n", 1), ("0.5,1.0\n2.0\n", 1)],
    )
    def test_bad_ground_truth_reports_row(self, tmp_path, sidecar, row):
        path = tmp_path / DATASET_FILE
        path.write_text("y,x_1,x_2\n1.0,2.0,3.0\n")
        (tmp_path / GROUND_TRUTH_FILE).write_text(sidecar)
        with pytest.raises(DatasetParseError) as excinfo:
            load_dataset(path)
        assert excinfo.value.row == row
        assert GROUND_TRUTH_FILE in str(excinfo.value)

    def test_ground_truth_without_trailing_newline(self, tmp_path):
        path = tmp_path / DATASET_FILE
        path.write_text("y,x_1,x_2\n1.0,2.0,3.0\n")
        (tmp_path / GROUND_TRUTH_FILE).write_text("0.25\n-1.5")
        _, truth = load_dataset(path)
        assert_array_equal(truth, [0.25, -1.5])
