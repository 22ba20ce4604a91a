#!/usr/bin/env python3
"""
Accuracy metrics, baseline regressors and the timing harness used to
compare the sparse model against dense and kernel methods.
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import linalg
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel
from sklearn.kernel_ridge import KernelRidge
from sklearn.linear_model import Ridge
from sklearn.svm import SVR
from threadpoolctl import threadpool_limits

from sindy_regression import (
    LabeledDataset,
    Standardizer,
    build_library,
    evaluate_library,
    fit_sparse_model,
)
from soh_errors import EmptyInput, InvalidConfig, LengthMismatch, NumericalFailure, ShapeMismatch

logger = logging.getLogger(__name__)

LENGTHSCALE_GRID = np.geomspace(0.25, 16.0, 9)


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    max_err: float
    n: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class TimingReport:
    method_name: str
    train_time_s: float
    test_time_per_sample_ms: float
    nnz: int
    library_size: int
    repetitions: int = 3

    def to_dict(self) -> Dict:
        return asdict(self)


def metrics(predicted: Sequence[float], actual: Sequence[float]) -> MetricReport:
    """MAE, RMSE and maximum absolute error in SOH-percent."""
    predicted = np.asarray(predicted, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if predicted.size != actual.size:
        raise LengthMismatch(f"{predicted.size} predictions for {actual.size} labels")
    if predicted.size == 0:
        raise EmptyInput("no samples to score")

    errors = np.abs(predicted - actual)
    mae = float(np.mean(errors))
    max_err = float(np.max(errors))
    rmse = float(np.sqrt(np.mean(errors ** 2)))
    # keep mae <= rmse <= max exact under rounding
    rmse = min(max(rmse, mae), max_err)
    return MetricReport(mae=mae, rmse=rmse, max_err=max_err, n=int(predicted.size))


# --- baselines -----------------------------------------------------------------

def _row(features, width: int) -> np.ndarray:
    row = np.asarray(features, dtype=float)
    if row.shape != (width,):
        raise ShapeMismatch(f"expected {width} features, got shape {row.shape}")
    return row.reshape(1, -1)


class RidgeBaseline:
    """Dense ridge fit over the same polynomial library as the sparse model."""

    def __init__(self, standardizer, library, coefficients):
        self.standardizer = standardizer
        self.library = library
        self.coefficients = np.asarray(coefficients, dtype=float)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.coefficients))

    @property
    def library_size(self) -> int:
        return len(self.library)

    def predict(self, features) -> np.ndarray:
        design = evaluate_library(self.library, self.standardizer.transform(features))
        return design @ self.coefficients

    def predict_one(self, features) -> float:
        return float(self.predict(_row(features, self.library.num_vars))[0])


def fit_ridge(dataset: LabeledDataset, alpha: float = 1e-3, library_degree: int = 3,
              standardize: bool = True) -> RidgeBaseline:
    if alpha < 0:
        raise InvalidConfig(f"ridge alpha must be >= 0, got {alpha}")
    num_vars = dataset.features.shape[1]
    standardizer = Standardizer.fit(dataset.features) if standardize else Standardizer.identity(num_vars)
    library = build_library(num_vars, library_degree)
    design = evaluate_library(library, standardizer.transform(dataset.features))
    try:
        regressor = Ridge(alpha=alpha, fit_intercept=False, solver="svd").fit(design, dataset.labels)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"ridge fit failed: {exc}")
    if not np.all(np.isfinite(regressor.coef_)):
        raise NumericalFailure("ridge fit produced non-finite coefficients")
    return RidgeBaseline(standardizer, library, regressor.coef_)


class KernelBaseline:
    """Squared-exponential kernel ridge regression; keeps every training row."""

    def __init__(self, standardizer, regressor, label_mean, lengthscale, noise_sd, num_rows):
        self.standardizer = standardizer
        self.regressor = regressor
        self.label_mean = label_mean
        self.lengthscale = lengthscale
        self.noise_sd = noise_sd
        self.num_rows = num_rows

    @property
    def nnz(self) -> int:
        return self.num_rows

    @property
    def library_size(self) -> int:
        return self.num_rows

    def predict(self, features) -> np.ndarray:
        z = self.standardizer.transform(features)
        return self.regressor.predict(z) + self.label_mean

    def predict_one(self, features) -> float:
        return float(self.predict(_row(features, self.standardizer.means.size))[0])


def _rbf_gram(z: np.ndarray, lengthscale: float) -> np.ndarray:
    squared = np.sum(z ** 2, axis=1)
    distances = np.maximum(squared[:, None] + squared[None, :] - 2.0 * z @ z.T, 0.0)
    return np.exp(-distances / (2.0 * lengthscale ** 2))


def select_lengthscale(z: np.ndarray, centered: np.ndarray, noise_sd: float,
                       grid: Sequence[float] = LENGTHSCALE_GRID) -> float:
    """Lengthscale with the smallest closed-form leave-one-out squared error."""
    best, best_error = None, np.inf
    regularizer = max(noise_sd ** 2, 1e-12)
    identity = np.eye(z.shape[0])
    for lengthscale in grid:
        gram = _rbf_gram(z, lengthscale) + regularizer * identity
        try:
            factor = linalg.cho_factor(gram)
        except linalg.LinAlgError:
            logger.debug("Gram matrix not positive definite at lengthscale %.3g", lengthscale)
            continue
        inverse = linalg.cho_solve(factor, identity)
        residuals = (inverse @ centered) / np.diag(inverse)
        error = float(np.mean(residuals ** 2))
        if error < best_error:
            best, best_error = float(lengthscale), error
    if best is None:
        raise NumericalFailure("kernel Gram matrix is singular for every candidate lengthscale")
    logger.info("Kernel baseline lengthscale %.3g (LOO MSE %.4g)", best, best_error)
    return best


def fit_kernel_baseline(dataset: LabeledDataset, lengthscale: Optional[float] = None,
                        noise_sd: float = 0.1) -> KernelBaseline:
    if len(dataset) < 2:
        raise EmptyInput(f"kernel baseline needs at least 2 rows, got {len(dataset)}")
    if lengthscale is not None and not lengthscale > 0:
        raise InvalidConfig(f"lengthscale must be > 0, got {lengthscale}")
    if noise_sd < 0:
        raise InvalidConfig(f"noise_sd must be >= 0, got {noise_sd}")

    standardizer = Standardizer.fit(dataset.features)
    z = standardizer.transform(dataset.features)
    label_mean = float(np.mean(dataset.labels))
    centered = dataset.labels - label_mean
    if lengthscale is None:
        lengthscale = select_lengthscale(z, centered, noise_sd)

    regressor = KernelRidge(alpha=max(noise_sd ** 2, 1e-12), kernel="rbf",
                            gamma=1.0 / (2.0 * lengthscale ** 2))
    try:
        regressor.fit(z, centered)
    except (np.linalg.LinAlgError, linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"kernel ridge fit failed: {exc}")
    if not np.all(np.isfinite(regressor.dual_coef_)):
        raise NumericalFailure("kernel ridge fit produced non-finite weights")
    return KernelBaseline(standardizer, regressor, label_mean, lengthscale, noise_sd, len(dataset))


class SklearnBaseline:
    """Standardized-input wrapper for an sklearn regressor (SVR, GPR)."""

    def __init__(self, standardizer, regressor, num_rows, nnz=None):
        self.standardizer = standardizer
        self.regressor = regressor
        self.num_rows = num_rows
        self._nnz = num_rows if nnz is None else nnz

    @property
    def nnz(self) -> int:
        return int(self._nnz)

    @property
    def library_size(self) -> int:
        return self.num_rows

    def predict(self, features) -> np.ndarray:
        return self.regressor.predict(self.standardizer.transform(features))

    def predict_one(self, features) -> float:
        return float(self.predict(_row(features, self.standardizer.means.size))[0])


def fit_svr(dataset: LabeledDataset, C: float = 100.0, epsilon: float = 0.1) -> SklearnBaseline:
    standardizer = Standardizer.fit(dataset.features)
    regressor = SVR(kernel="rbf", C=C, epsilon=epsilon, gamma="scale")
    regressor.fit(standardizer.transform(dataset.features), dataset.labels)
    return SklearnBaseline(standardizer, regressor, len(dataset), nnz=len(regressor.support_))


def fit_gpr(dataset: LabeledDataset, restarts: int = 0, seed: int = 0) -> SklearnBaseline:
    standardizer = Standardizer.fit(dataset.features)
    num_vars = dataset.features.shape[1]
    kernel = ConstantKernel(1.0) * RBF(length_scale=np.ones(num_vars)) + WhiteKernel(noise_level=0.01)
    regressor = GaussianProcessRegressor(kernel=kernel, normalize_y=True,
                                         n_restarts_optimizer=restarts, random_state=seed)
    try:
        regressor.fit(standardizer.transform(dataset.features), dataset.labels)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"GPR fit failed: {exc}")
    logger.info("GPR kernel after fit: %s", regressor.kernel_)
    return SklearnBaseline(standardizer, regressor, len(dataset))


# --- methods -------------------------------------------------------------------

@dataclass(frozen=True)
class SindyMethod:
    library_degree: int = 3
    threshold: float = 0.05
    max_iter: int = 20
    ridge_eps: float = 1e-10
    name: str = "SINDy"

    def fit(self, dataset: LabeledDataset):
        return fit_sparse_model(dataset, self.library_degree, self.threshold, self.max_iter, self.ridge_eps)


@dataclass(frozen=True)
class RidgeMethod:
    alpha: float = 1e-3
    library_degree: int = 3
    name: str = "Ridge"

    def fit(self, dataset: LabeledDataset):
        return fit_ridge(dataset, self.alpha, self.library_degree)


@dataclass(frozen=True)
class KernelMethod:
    lengthscale: Optional[float] = None
    noise_sd: float = 0.1
    name: str = "KernelRidge"

    def fit(self, dataset: LabeledDataset):
        return fit_kernel_baseline(dataset, self.lengthscale, self.noise_sd)


@dataclass(frozen=True)
class SvrMethod:
    C: float = 100.0
    epsilon: float = 0.1
    name: str = "SVR"

    def fit(self, dataset: LabeledDataset):
        return fit_svr(dataset, self.C, self.epsilon)


@dataclass(frozen=True)
class GprMethod:
    restarts: int = 0
    seed: int = 0
    name: str = "GPR"

    def fit(self, dataset: LabeledDataset):
        return fit_gpr(dataset, self.restarts, self.seed)


METHODS = {
    "sindy": SindyMethod,
    "ridge": RidgeMethod,
    "kernel": KernelMethod,
    "svr": SvrMethod,
    "gpr": GprMethod,
}


def synthetic_dataset(rows: int = 600, seed: int = 7, noise_sd: float = 0.01,
                      num_features: int = 7) -> LabeledDataset:
    """
    Rows of z-scored features labeled SOH = 90 + 1.5*z0 + 0.3*z1^2 - 1.0*z2^3
    plus Gaussian noise: a sparse generative model for recovery and timing runs.
    """
    if rows < 2 or num_features < 3:
        raise InvalidConfig(f"synthetic dataset needs rows >= 2 and num_features >= 3, got {rows}, {num_features}")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(rows, num_features))
    z = Standardizer.fit(raw).transform(raw)
    labels = 90.0 + 1.5 * z[:, 0] + 0.3 * z[:, 1] ** 2 - 1.0 * z[:, 2] ** 3 + rng.normal(0.0, noise_sd, rows)
    return LabeledDataset(
        features=z,
        labels=labels,
        provenance=tuple(("synthetic", i) for i in range(rows)),
        feature_names=tuple(f"z{i}" for i in range(num_features)),
    )


def compare_methods(methods: Sequence, train: LabeledDataset, test: LabeledDataset) -> Dict[str, MetricReport]:
    results = {}
    for method in methods:
        predictor = method.fit(train)
        results[method.name] = metrics(predictor.predict(test.features), test.labels)
        logger.info("%s: MAE %.4f RMSE %.4f MAX %.4f", method.name,
                    results[method.name].mae, results[method.name].rmse, results[method.name].max_err)
    return results


def bench(method, train: LabeledDataset, test: LabeledDataset, repetitions: int = 5) -> TimingReport:
    """
    Median wall-clock fit time and per-sample predict time over `repetitions`
    runs, after one discarded warm-up, pinned to a single BLAS/OpenMP thread.
    Test time is measured one sample at a time.
    """
    if repetitions < 3:
        raise InvalidConfig(f"bench needs at least 3 repetitions, got {repetitions}")
    rows = test.features
    if rows.shape[0] == 0:
        raise EmptyInput("bench needs at least one test row")

    with threadpool_limits(limits=1):
        predictor = method.fit(train)
        predictor.predict_one(rows[0])

        train_times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            predictor = method.fit(train)
            train_times.append(time.perf_counter() - start)

        test_times = []
        for _ in range(repetitions):
            start = time.perf_counter()
            for row in rows:
                predictor.predict_one(row)
            test_times.append((time.perf_counter() - start) / rows.shape[0])

    report = TimingReport(
        method_name=method.name,
        train_time_s=float(np.median(train_times)),
        test_time_per_sample_ms=float(np.median(test_times)) * 1000.0,
        nnz=predictor.nnz,
        library_size=predictor.library_size,
        repetitions=repetitions,
    )
    logger.info("%s: train %.4f s, test %.4f ms/sample", report.method_name,
                report.train_time_s, report.test_time_per_sample_ms)
    return report
