#!/usr/bin/env python3
"""
Tests for the candidate library, STLS, dynamics identification and sparse models
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from sindy_regression import (
    LabeledDataset,
    SparseModel,
    Standardizer,
    build_library,
    evaluate_library,
    finite_difference,
    fit_dynamics,
    fit_sparse_model,
    load_model,
    save_model,
    stls,
)
from soh_errors import (
    InvalidConfig,
    NoActiveTerms,
    NumericalFailure,
    SchemaVersionMismatch,
    ShapeMismatch,
    TooFewSnapshots,
)
from soh_evaluation import synthetic_dataset


def brute_force_terms(m, d):
    return {e for e in itertools.product(range(d + 1), repeat=m) if sum(e) <= d}


# --- library ---

def test_library_examples():
    assert build_library(1, 2).terms == ((0,), (1,), (2,))
    assert len(build_library(7, 3)) == 120
    assert build_library(2, 0).terms == ((0, 0),)
    assert build_library(2, 2).terms == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


@pytest.mark.parametrize("m", range(1, 6))
@pytest.mark.parametrize("d", range(0, 5))
def test_library_size_matches_enumeration(m, d):
    library = build_library(m, d)
    assert len(library) == math.comb(m + d, d)
    assert set(library.terms) == brute_force_terms(m, d)
    assert library.terms[0] == (0,) * m
    assert [sum(t) for t in library.terms] == sorted(sum(t) for t in library.terms)


def test_library_rejects_bad_arguments():
    with pytest.raises(InvalidConfig):
        build_library(0, 2)
    with pytest.raises(InvalidConfig):
        build_library(2, 1, extra_functions=[("tan", 0)])


def test_evaluate_library_examples():
    np.testing.assert_array_equal(evaluate_library(build_library(1, 3), [[2.0]]), [[1.0, 2.0, 4.0, 8.0]])

    x = np.random.default_rng(0).normal(size=(5, 3))
    library = build_library(3, 2)
    design = evaluate_library(library, x)
    np.testing.assert_array_equal(design[:, 1:4], x)
    for row in range(5):
        for column, exponents in enumerate(library.terms):
            expected = 1.0
            for var, power in enumerate(exponents):
                expected *= x[row, var] ** power
            assert design[row, column] == pytest.approx(expected, rel=1e-14)

    zero_row = evaluate_library(build_library(3, 3), np.zeros((1, 3)))[0]
    assert zero_row[0] == 1.0 and not zero_row[1:].any()

    with pytest.raises(ShapeMismatch):
        evaluate_library(library, np.zeros((4, 2)))


def test_extra_functions_are_appended():
    library = build_library(2, 1, extra_functions=[("sin", 1), ("exp", 0)])
    design = evaluate_library(library, [[0.5, 0.25]])
    assert library.term_names(["a", "b"]) == ["1", "a", "b", "sin(b)", "exp(a)"]
    np.testing.assert_allclose(design[0, 3:], [math.sin(0.25), math.exp(0.5)])


# --- STLS ---

def test_stls_recovers_exact_sparse_model():
    x = np.random.default_rng(1).normal(size=(50, 2))
    design = evaluate_library(build_library(2, 1), x)
    result = stls(design, 2.0 * x[:, 0], threshold=0.5)
    np.testing.assert_allclose(result.coefficients, [0.0, 2.0, 0.0], atol=1e-12)
    assert result.coefficients[0] == 0.0 and result.coefficients[2] == 0.0
    assert result.converged


def test_stls_without_threshold_is_least_squares():
    rng = np.random.default_rng(2)
    design = rng.normal(size=(40, 6))
    targets = rng.normal(size=40)
    result = stls(design, targets, threshold=0.0)
    np.testing.assert_allclose(result.coefficients, np.linalg.lstsq(design, targets, rcond=None)[0], atol=1e-10)


def test_stls_active_set_shrinks_and_settles():
    data = synthetic_dataset(200, seed=3)
    design = evaluate_library(build_library(7, 3), data.features)
    result = stls(design, data.labels, threshold=0.1)
    sizes = list(result.active_sizes)
    assert sizes == sorted(sizes, reverse=True)

    active = result.coefficients != 0
    assert np.all(np.abs(result.coefficients[active]) >= 0.1)
    refit = np.linalg.lstsq(design[:, active], data.labels, rcond=None)[0]
    np.testing.assert_allclose(result.coefficients[active], refit, rtol=1e-9, atol=1e-9)


def test_nnz_does_not_grow_with_threshold():
    data = synthetic_dataset(200, seed=4)
    counts = [fit_sparse_model(data, threshold=t).nnz for t in (0.0, 0.05, 0.1, 0.5, 2.0, 5.0)]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == 120


def test_stls_raises_when_threshold_removes_everything():
    x = np.random.default_rng(5).normal(size=(30, 2))
    design = evaluate_library(build_library(2, 1), x)
    with pytest.raises(NoActiveTerms):
        stls(design, 0.01 * x[:, 0], threshold=1.0)


def test_stls_refits_when_iterations_run_out():
    data = synthetic_dataset(200, seed=3)
    design = evaluate_library(build_library(7, 3), data.features)
    result = stls(design, data.labels, threshold=0.1, max_iter=1)
    assert not result.converged

    active = result.coefficients != 0
    assert np.all(np.abs(result.coefficients[active]) >= 0.1)
    refit = np.linalg.lstsq(design[:, active], data.labels, rcond=None)[0]
    np.testing.assert_allclose(result.coefficients[active], refit, rtol=1e-9, atol=1e-9)


def cascading_design():
    # dropping the first column pulls the second below 0.1, then the third is left alone
    design = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return design, design @ np.array([-0.09, 0.12, 0.5])


def test_stls_without_fixed_point_in_budget_raises():
    design, targets = cascading_design()
    with pytest.raises(NumericalFailure):
        stls(design, targets, threshold=0.1, max_iter=1)


def test_stls_cascade_settles_with_enough_iterations():
    design, targets = cascading_design()
    refit = stls(design, targets, threshold=0.1, max_iter=2)
    assert not refit.converged and refit.active_sizes == (3, 2)
    np.testing.assert_allclose(refit.coefficients, [0.0, 0.0, 0.5], atol=1e-12)

    settled = stls(design, targets, threshold=0.1, max_iter=3)
    assert settled.converged and settled.iterations == 3
    np.testing.assert_allclose(settled.coefficients, refit.coefficients, atol=1e-12)


@pytest.mark.performance()
def test_sparse_recovery_of_generative_soh_model():
    data = synthetic_dataset(200, seed=7, noise_sd=0.01)
    start = time.perf_counter()
    model = fit_sparse_model(data, library_degree=3, threshold=0.1)
    elapsed = time.perf_counter() - start

    expected = {
        (0, 0, 0, 0, 0, 0, 0): 90.0,
        (1, 0, 0, 0, 0, 0, 0): 1.5,
        (0, 2, 0, 0, 0, 0, 0): 0.3,
        (0, 0, 3, 0, 0, 0, 0): -1.0,
    }
    found = {term: c for term, c in zip(model.library.terms, model.coefficients) if c != 0}
    assert set(found) == set(expected)
    for term, value in expected.items():
        assert found[term] == pytest.approx(value, rel=0.05)
    assert elapsed < 1.0


# --- finite differences and dynamics ---

def test_finite_difference_examples():
    np.testing.assert_array_equal(finite_difference(np.full((10, 2), 4.0), 0.5), np.zeros((10, 2)))

    t = np.arange(0.0, 2.0, 0.25)
    np.testing.assert_allclose(finite_difference(3.0 * t, 0.25).ravel(), 3.0, rtol=1e-12)

    dt = 1e-3
    t = np.arange(0.0, 2 * np.pi, dt)
    derivative = finite_difference(np.sin(t), dt).ravel()
    assert np.max(np.abs(derivative - np.cos(t))) < 1e-2

    with pytest.raises(TooFewSnapshots):
        finite_difference([[1.0, 2.0]], 0.1)


def oscillator(_, x):
    return [-0.1 * x[0] + 2.0 * x[1], -2.0 * x[0] - 0.1 * x[1]]


@pytest.mark.performance()
def test_damped_oscillator_recovery():
    dt = 1e-3
    t = np.arange(0.0, 10.0 + dt / 2, dt)
    trajectory = solve_ivp(oscillator, (0.0, t[-1]), [2.0, 0.0], t_eval=t,
                           method="DOP853", rtol=1e-10, atol=1e-12).y.T

    start = time.perf_counter()
    models = fit_dynamics(trajectory, dt, library_degree=2, threshold=0.05)
    elapsed = time.perf_counter() - start

    # library order: 1, x1, x2, x1^2, x1*x2, x2^2
    expected = [[0.0, -0.1, 2.0, 0.0, 0.0, 0.0], [0.0, -2.0, -0.1, 0.0, 0.0, 0.0]]
    for model, truth in zip(models, expected):
        np.testing.assert_allclose(model.coefficients, truth, atol=1e-2)
        assert np.all(model.coefficients[[0, 3, 4, 5]] == 0.0)
    assert elapsed < 5.0


def test_exponential_decay_recovery():
    dt = 1e-3
    t = np.arange(0.0, 5.0, dt)
    (model,) = fit_dynamics(np.exp(-t), dt, library_degree=2)
    assert model.coefficients[1] == pytest.approx(-1.0, abs=1e-2)
    assert model.nnz == 1


def test_constant_trajectory_has_no_active_terms():
    with pytest.raises(NoActiveTerms):
        fit_dynamics(np.ones((100, 2)), 0.1)


def test_exact_derivatives_recover_polynomial_dynamics():
    x = np.random.default_rng(8).uniform(-1.0, 1.0, size=(300, 2))
    derivatives = np.column_stack([
        0.5 - x[:, 0] + 0.3 * x[:, 0] * x[:, 1],
        1.5 * x[:, 0] - 0.2 * x[:, 1] ** 2,
    ])
    models = fit_dynamics(x, 1.0, library_degree=2, derivatives=derivatives)
    np.testing.assert_allclose(models[0].coefficients, [0.5, -1.0, 0.0, 0.0, 0.3, 0.0], atol=1e-8)
    np.testing.assert_allclose(models[1].coefficients, [0.0, 1.5, 0.0, 0.0, 0.0, -0.2], atol=1e-8)


# --- models ---

def linear_model_dataset():
    x = np.random.default_rng(11).uniform(0.5, 2.0, size=(40, 2))
    return LabeledDataset(x, 2.0 * x[:, 0])


def test_predict_reproduces_exact_training_targets():
    data = linear_model_dataset()
    model = fit_sparse_model(data, library_degree=2, standardize=False)
    np.testing.assert_allclose(model.predict(data.features), data.labels, atol=1e-9)
    assert model.nnz == 1
    assert model.reduction_ratio == pytest.approx(1 - 1 / 6)
    assert model.equation().startswith("soh = 2.0")


def test_zero_coefficients_predict_zero():
    library = build_library(3, 2)
    model = SparseModel(library, np.zeros(len(library)), 0.05, 1e-10, Standardizer.identity(3), 1)
    assert model.predict_one([1.0, -2.0, 3.0]) == 0.0
    np.testing.assert_array_equal(model.predict(np.ones((4, 3))), np.zeros(4))


def test_batch_predict_matches_single_predicts_bitwise():
    data = synthetic_dataset(150, seed=12, noise_sd=0.2)
    model = fit_sparse_model(data, library_degree=3, threshold=0.05)
    batch = model.predict(data.features)
    singles = np.array([model.predict_one(row) for row in data.features])
    assert batch.tobytes() == singles.tobytes()


def test_predict_is_homogeneous_in_coefficients():
    data = synthetic_dataset(100, seed=13)
    model = fit_sparse_model(data, threshold=0.1)
    scaled = SparseModel(model.library, 2.0 * model.coefficients, model.threshold, model.ridge_eps,
                         model.standardizer, model.iterations_used, model.feature_names)
    np.testing.assert_allclose(scaled.predict(data.features), 2.0 * model.predict(data.features), rtol=1e-12)


def test_predict_rejects_wrong_width():
    model = fit_sparse_model(linear_model_dataset(), library_degree=1, standardize=False)
    with pytest.raises(ShapeMismatch):
        model.predict_one([1.0, 2.0, 3.0])
    with pytest.raises(ShapeMismatch):
        model.predict(np.ones((3, 5)))


def test_model_json_round_trip(tmp_path):
    data = synthetic_dataset(120, seed=14)
    model = fit_sparse_model(data, threshold=0.1, trained_at="2024-01-01T00:00:00+00:00")
    path = save_model(model, tmp_path / "model.json")
    loaded = load_model(path)

    assert loaded.to_dict() == model.to_dict()
    assert loaded.predict(data.features).tobytes() == model.predict(data.features).tobytes()
    saved = json.loads(path.read_text(encoding="utf-8"))
    for key in ("num_vars", "max_degree", "terms", "coefficients", "threshold", "ridge_eps",
                "standardizer", "feature_names", "trained_at"):
        assert key in saved


def test_model_json_without_coefficients_is_rejected():
    data = synthetic_dataset(60, seed=15)
    payload = fit_sparse_model(data, threshold=0.1).to_dict()
    del payload["coefficients"]
    with pytest.raises(SchemaVersionMismatch):
        SparseModel.from_dict(payload)
