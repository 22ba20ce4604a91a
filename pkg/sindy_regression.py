#!/usr/bin/env python3
"""
Sparse regression over a candidate-function library.

Builds polynomial libraries, runs sequential thresholded least squares
(STLS) and wraps the result in an immutable SparseModel. The same solver
serves the static SOH regression and continuous-time dynamics
identification from state snapshots.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy
from scipy import linalg

from soh_errors import (
    DataError,
    EmptyInput,
    InvalidConfig,
    IoFailure,
    LengthMismatch,
    NoActiveTerms,
    NumericalFailure,
    SchemaVersionMismatch,
    ShapeMismatch,
    TooFewSnapshots,
)

logger = logging.getLogger(__name__)

EXTRA_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_SYMPY_FUNCTIONS = {"sin": sympy.sin, "cos": sympy.cos, "exp": sympy.exp}

MODEL_KEYS = ("num_vars", "max_degree", "terms", "coefficients", "threshold",
              "ridge_eps", "standardizer", "feature_names", "trained_at")


def deterministic_timestamp(trained_at: Optional[str] = None) -> str:
    """Explicit value, else SOURCE_DATE_EPOCH, else the Unix epoch (ISO-8601, UTC)."""
    if trained_at:
        return trained_at
    epoch = os.getenv("SOURCE_DATE_EPOCH")
    seconds = 0
    if epoch:
        try:
            seconds = int(epoch)
        except ValueError:
            logger.warning("Ignoring non-integer SOURCE_DATE_EPOCH=%r", epoch)
    return datetime.fromtimestamp(seconds, tz=timezone.utc).isoformat()


# --- datasets ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature snapshots (p x m), one SOH label per row and the (cell, cycle) of each row."""
    features: np.ndarray
    labels: np.ndarray
    provenance: Tuple[Tuple[str, int], ...] = ()
    feature_names: Tuple[str, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=float)
        if features.ndim != 2:
            raise ShapeMismatch(f"features must be a p x m matrix, got shape {features.shape}")
        if labels.ndim != 1:
            raise ShapeMismatch(f"labels must be a vector, got shape {labels.shape}")
        if features.shape[0] != labels.size:
            raise LengthMismatch(f"{features.shape[0]} feature rows but {labels.size} labels")
        if labels.size == 0:
            raise EmptyInput("dataset has no rows")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(features.shape[1]))
        if len(names) != features.shape[1]:
            raise ShapeMismatch(f"{len(names)} feature names for {features.shape[1]} columns")
        provenance = tuple((str(cell), int(cycle)) for cell, cycle in self.provenance)
        if provenance and len(provenance) != labels.size:
            raise LengthMismatch(f"{len(provenance)} provenance entries for {labels.size} rows")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "provenance", provenance)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def cells(self) -> List[str]:
        return sorted({cell for cell, _ in self.provenance})

    def select(self, names: Sequence[str]) -> "LabeledDataset":
        missing = [name for name in names if name not in self.feature_names]
        if missing:
            raise ShapeMismatch(f"unknown features: {', '.join(missing)}")
        columns = [self.feature_names.index(name) for name in names]
        return LabeledDataset(self.features[:, columns], self.labels, self.provenance, tuple(names))

    def subset(self, mask: np.ndarray) -> "LabeledDataset":
        mask = np.asarray(mask, dtype=bool)
        provenance = tuple(p for p, keep in zip(self.provenance, mask) if keep)
        return LabeledDataset(self.features[mask], self.labels[mask], provenance, self.feature_names)

    def split_cells(self, cells: Iterable[str]) -> Tuple["LabeledDataset", Optional["LabeledDataset"]]:
        """(rows of other cells, rows of the given cells or None)."""
        cells = set(cells)
        held = np.array([cell in cells for cell, _ in self.provenance], dtype=bool)
        if held.all():
            raise EmptyInput("every row belongs to a held-out cell")
        return self.subset(~held), (self.subset(held) if held.any() else None)


# --- library -------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateLibrary:
    """Monomial exponent tuples in graded-lex order (constant first), then extra functions."""
    num_vars: int
    max_degree: int
    terms: Tuple[Tuple[int, ...], ...]
    extras: Tuple[Tuple[str, int], ...] = ()

    def __len__(self) -> int:
        return len(self.terms) + len(self.extras)

    @property
    def size(self) -> int:
        return len(self)

    def term_names(self, feature_names: Optional[Sequence[str]] = None) -> List[str]:
        names = list(feature_names or [f"x{i}" for i in range(self.num_vars)])
        labels = []
        for exponents in self.terms:
            parts = [name if e == 1 else f"{name}^{e}" for name, e in zip(names, exponents) if e]
            labels.append("*".join(parts) or "1")
        labels.extend(f"{func}({names[var]})" for func, var in self.extras)
        return labels


def build_library(num_vars: int, max_degree: int,
                  extra_functions: Sequence[Tuple[str, int]] = ()) -> CandidateLibrary:
    """All monomials of total degree <= max_degree over num_vars variables."""
    if num_vars < 1:
        raise InvalidConfig(f"num_vars must be >= 1, got {num_vars}")
    if max_degree < 0:
        raise InvalidConfig(f"max_degree must be >= 0, got {max_degree}")

    terms = []
    for degree in range(max_degree + 1):
        for combo in combinations_with_replacement(range(num_vars), degree):
            exponents = [0] * num_vars
            for var in combo:
                exponents[var] += 1
            terms.append(tuple(exponents))

    extras = []
    for func, var in extra_functions:
        if func not in EXTRA_FUNCTIONS:
            raise InvalidConfig(f"unknown library function {func!r}; choose from {sorted(EXTRA_FUNCTIONS)}")
        if not 0 <= int(var) < num_vars:
            raise InvalidConfig(f"library function {func} refers to variable {var} of {num_vars}")
        extras.append((func, int(var)))
    return CandidateLibrary(num_vars, max_degree, tuple(terms), tuple(extras))


def _as_matrix(features, num_vars: int) -> np.ndarray:
    matrix = np.asarray(features, dtype=float)
    if matrix.ndim != 2 or matrix.shape[1] != num_vars:
        raise ShapeMismatch(f"expected a p x {num_vars} matrix, got shape {matrix.shape}")
    return matrix


def evaluate_library(library: CandidateLibrary, features) -> np.ndarray:
    """Design matrix: column j is the product of features raised to term j's exponents."""
    matrix = _as_matrix(features, library.num_vars)
    design = np.empty((matrix.shape[0], len(library)))
    for column, exponents in enumerate(library.terms):
        values = np.ones(matrix.shape[0])
        for var, power in enumerate(exponents):
            for _ in range(power):
                values = values * matrix[:, var]
        design[:, column] = values
    for offset, (func, var) in enumerate(library.extras):
        design[:, len(library.terms) + offset] = EXTRA_FUNCTIONS[func](matrix[:, var])
    return design


# --- standardization -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Standardizer:
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        scales = np.array(self.scales, dtype=float)
        if means.shape != scales.shape or means.ndim != 1:
            raise ShapeMismatch("standardizer means and scales must be vectors of equal length")
        if np.any(scales <= 0):
            raise InvalidConfig("standardizer scales must be > 0")
        means.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)

    @classmethod
    def fit(cls, features) -> "Standardizer":
        matrix = np.asarray(features, dtype=float)
        scales = matrix.std(axis=0)
        # constant columns pass through unscaled
        scales[scales == 0] = 1.0
        return cls(matrix.mean(axis=0), scales)

    @classmethod
    def identity(cls, num_vars: int) -> "Standardizer":
        return cls(np.zeros(num_vars), np.ones(num_vars))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.means == 0) and np.all(self.scales == 1))

    def transform(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.means) / self.scales

    def to_dict(self) -> Dict:
        return {"means": self.means.tolist(), "scales": self.scales.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "Standardizer":
        return cls(data["means"], data["scales"])


# --- STLS ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StlsResult:
    coefficients: np.ndarray
    iterations: int
    active_sizes: Tuple[int, ...]
    converged: bool


def _restricted_solve(r: np.ndarray, qtb: np.ndarray, active: np.ndarray, ridge_eps: float) -> np.ndarray:
    sub = r[:, active]
    try:
        solution, _, rank, _ = np.linalg.lstsq(sub, qtb, rcond=None)
        if rank == sub.shape[1] and np.all(np.isfinite(solution)):
            return solution
    except np.linalg.LinAlgError:
        pass

    # rank deficient: ridge-stabilized normal equations, ridge relative to the largest column norm
    gram = sub.T @ sub
    gram = gram + ridge_eps * max(float(np.max(np.diag(gram))), 1.0) * np.eye(sub.shape[1])
    try:
        solution = linalg.solve(gram, sub.T @ qtb, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"least-squares solve failed on {sub.shape[1]} active columns: {exc}")
    if not np.all(np.isfinite(solution)):
        raise NumericalFailure(f"least-squares solve produced non-finite coefficients on {sub.shape[1]} columns")
    return solution


def stls(design, targets, threshold: float = 0.05, max_iter: int = 20,
         ridge_eps: float = 1e-10) -> StlsResult:
    """
    Sequential thresholded least squares.

    Alternates a least-squares solve over the active columns with removal of
    coefficients smaller than the threshold, until no active coefficient is
    below it. The design is QR-factored once; each solve works on the
    triangular factor restricted to the active columns.

    If max_iter runs out, the surviving columns are refit once; the result
    is returned unconverged when that refit keeps every term, otherwise
    NumericalFailure is raised.
    """
    design = np.asarray(design, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if design.ndim != 2 or targets.ndim != 1:
        raise ShapeMismatch(f"design must be p x K and targets a vector, got {design.shape} and {targets.shape}")
    if design.shape[0] != targets.size:
        raise ShapeMismatch(f"design has {design.shape[0]} rows but {targets.size} targets")
    if design.shape[0] < 1 or design.shape[1] < 1:
        raise EmptyInput(f"design matrix is empty: {design.shape}")
    if threshold < 0 or max_iter < 1 or ridge_eps < 0:
        raise InvalidConfig(f"need threshold >= 0, max_iter >= 1, ridge_eps >= 0; "
                            f"got {threshold}, {max_iter}, {ridge_eps}")
    if not (np.all(np.isfinite(design)) and np.all(np.isfinite(targets))):
        raise NumericalFailure("design or targets contain non-finite values")

    q, r = np.linalg.qr(design)
    qtb = q.T @ targets

    num_terms = design.shape[1]
    active = np.ones(num_terms, dtype=bool)
    sizes = []
    for iteration in range(1, max_iter + 1):
        sizes.append(int(active.sum()))
        coefficients = np.zeros(num_terms)
        coefficients[active] = _restricted_solve(r, qtb, active, ridge_eps)
        small = active & (np.abs(coefficients) < threshold)
        if not small.any():
            logger.debug("STLS converged after %d iterations with %d active terms", iteration, sizes[-1])
            return StlsResult(coefficients, iteration, tuple(sizes), True)
        active &= ~small
        if not active.any():
            raise NoActiveTerms(f"threshold {threshold} removed all {num_terms} library terms")

    # budget spent with the last pruning unsolved: one refit on the surviving columns
    coefficients = np.zeros(num_terms)
    coefficients[active] = _restricted_solve(r, qtb, active, ridge_eps)
    small = active & (np.abs(coefficients) < threshold)
    if small.any():
        raise NumericalFailure(f"STLS found no fixed point within {max_iter} iterations; "
                               f"{int(small.sum())} of {int(active.sum())} refit terms fell below {threshold}")
    logger.warning("STLS needed a final refit after %d iterations; %d terms kept", max_iter, int(active.sum()))
    return StlsResult(coefficients, max_iter, tuple(sizes), False)


# --- models --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SparseModel:
    library: CandidateLibrary
    coefficients: np.ndarray
    threshold: float
    ridge_eps: float
    standardizer: Standardizer
    iterations_used: int
    feature_names: Tuple[str, ...] = ()
    trained_at: str = ""
    _factors: np.ndarray = field(init=False, repr=False)
    _active_poly: np.ndarray = field(init=False, repr=False)
    _active_extras: Tuple[Tuple[float, str, int], ...] = field(init=False, repr=False)

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=float)
        if coefficients.shape != (len(self.library),):
            raise ShapeMismatch(f"{coefficients.size} coefficients for a library of {len(self.library)} terms")
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(self.library.num_vars))
        if len(names) != self.library.num_vars:
            raise ShapeMismatch(f"{len(names)} feature names for {self.library.num_vars} variables")
        object.__setattr__(self, "feature_names", names)
        if self.standardizer.means.size != self.library.num_vars:
            raise ShapeMismatch("standardizer width does not match the library")

        # active monomials as factor-index rows; padding points at a column of ones
        num_poly = len(self.library.terms)
        pad = self.library.num_vars
        factors = []
        active = []
        for index, exponents in enumerate(self.library.terms):
            if coefficients[index] == 0:
                continue
            row = [var for var, power in enumerate(exponents) for _ in range(power)]
            factors.append(row + [pad] * (self.library.max_degree - len(row)))
            active.append(index)
        factor_array = np.array(factors, dtype=np.intp).reshape(len(factors), self.library.max_degree)
        object.__setattr__(self, "_factors", factor_array)
        object.__setattr__(self, "_active_poly", coefficients[np.array(active, dtype=np.intp)])
        extras = tuple((float(coefficients[num_poly + k]), func, var)
                       for k, (func, var) in enumerate(self.library.extras)
                       if coefficients[num_poly + k] != 0)
        object.__setattr__(self, "_active_extras", extras)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.coefficients))

    @property
    def library_size(self) -> int:
        return len(self.library)

    @property
    def reduction_ratio(self) -> float:
        """Share of candidate terms removed by thresholding."""
        return 1.0 - self.nnz / self.library_size

    def _evaluate(self, matrix: np.ndarray) -> np.ndarray:
        z = (matrix - self.standardizer.means) / self.standardizer.scales
        rows = z.shape[0]
        padded = np.concatenate([z, np.ones((rows, 1))], axis=1)
        if self._factors.shape[0] == 0:
            total = np.zeros(rows)
        elif self._factors.shape[1] == 0:
            total = np.broadcast_to(self._active_poly, (rows, self._active_poly.size)).sum(axis=1)
        else:
            gathered = padded[:, self._factors]
            products = gathered[:, :, 0]
            for k in range(1, gathered.shape[2]):
                products = products * gathered[:, :, k]
            total = (products * self._active_poly).sum(axis=1)
        for coefficient, func, var in self._active_extras:
            total = total + coefficient * EXTRA_FUNCTIONS[func](z[:, var])
        return total

    def predict(self, features) -> Union[float, np.ndarray]:
        """SOH for an m-vector (float) or a p x m matrix (vector)."""
        values = np.asarray(features, dtype=float)
        if values.ndim == 1:
            return self.predict_one(values)
        return self._evaluate(_as_matrix(values, self.library.num_vars))

    def predict_one(self, features) -> float:
        values = np.asarray(features, dtype=float)
        if values.shape != (self.library.num_vars,):
            raise ShapeMismatch(f"expected {self.library.num_vars} features, got shape {values.shape}")
        # one-row batch: bitwise equal to the matching row of a batch prediction
        return float(self._evaluate(values.reshape(1, -1))[0])

    def equation(self, target_name: str = "soh", digits: int = 6) -> str:
        prefix = "" if self.standardizer.is_identity else "z_"
        symbols = [sympy.Symbol(prefix + name) for name in self.feature_names]
        expression = sympy.Integer(0)
        for coefficient, exponents in zip(self.coefficients, self.library.terms):
            if coefficient == 0:
                continue
            term = sympy.Float(float(coefficient), digits)
            for symbol, power in zip(symbols, exponents):
                if power:
                    term = term * symbol ** power
            expression = expression + term
        for coefficient, func, var in self._active_extras:
            expression = expression + sympy.Float(coefficient, digits) * _SYMPY_FUNCTIONS[func](symbols[var])
        return f"{target_name} = {sympy.sstr(expression)}"

    def to_dict(self) -> Dict:
        return {
            "num_vars": self.library.num_vars,
            "max_degree": self.library.max_degree,
            "terms": [list(term) for term in self.library.terms],
            "extras": [[func, var] for func, var in self.library.extras],
            "coefficients": self.coefficients.tolist(),
            "threshold": self.threshold,
            "ridge_eps": self.ridge_eps,
            "standardizer": self.standardizer.to_dict(),
            "feature_names": list(self.feature_names),
            "trained_at": self.trained_at,
            "iterations_used": self.iterations_used,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SparseModel":
        if not isinstance(data, dict):
            raise SchemaVersionMismatch("model entry is not a JSON object")
        missing = [key for key in MODEL_KEYS if key not in data]
        if missing:
            raise SchemaVersionMismatch(f"model JSON lacks {', '.join(missing)}")
        try:
            num_vars = int(data["num_vars"])
            terms = tuple(tuple(int(e) for e in term) for term in data["terms"])
            if any(len(term) != num_vars for term in terms):
                raise DataError(f"model terms must each have {num_vars} exponents")
            library = CandidateLibrary(
                num_vars=num_vars,
                max_degree=int(data["max_degree"]),
                terms=terms,
                extras=tuple((str(func), int(var)) for func, var in data.get("extras", [])),
            )
            return cls(
                library=library,
                coefficients=np.array(data["coefficients"], dtype=float),
                threshold=float(data["threshold"]),
                ridge_eps=float(data["ridge_eps"]),
                standardizer=Standardizer.from_dict(data["standardizer"]),
                iterations_used=int(data.get("iterations_used", 0)),
                feature_names=tuple(data["feature_names"]),
                trained_at=str(data["trained_at"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed model JSON: {exc}")


def predict(model: SparseModel, features) -> Union[float, np.ndarray]:
    return model.predict(features)


def fit_sparse_model(dataset: LabeledDataset, library_degree: int = 3, threshold: float = 0.05,
                     max_iter: int = 20, ridge_eps: float = 1e-10,
                     extra_functions: Sequence[Tuple[str, int]] = (), standardize: bool = True,
                     trained_at: Optional[str] = None) -> SparseModel:
    """Regress labels onto the candidate library of (z-scored) features with STLS."""
    num_vars = dataset.features.shape[1]
    standardizer = Standardizer.fit(dataset.features) if standardize else Standardizer.identity(num_vars)
    library = build_library(num_vars, library_degree, extra_functions)
    design = evaluate_library(library, standardizer.transform(dataset.features))
    result = stls(design, dataset.labels, threshold, max_iter, ridge_eps)
    model = SparseModel(
        library=library,
        coefficients=result.coefficients,
        threshold=threshold,
        ridge_eps=ridge_eps,
        standardizer=standardizer,
        iterations_used=result.iterations,
        feature_names=dataset.feature_names,
        trained_at=deterministic_timestamp(trained_at),
    )
    logger.info("Sparse model keeps %d of %d terms (%d STLS iterations)",
                model.nnz, model.library_size, result.iterations)
    return model


# --- dynamics ------------------------------------------------------------------

def finite_difference(states, dt: float) -> np.ndarray:
    """Forward differences; the last row repeats the final step (backward difference)."""
    snapshots = np.asarray(states, dtype=float)
    if snapshots.ndim == 1:
        snapshots = snapshots.reshape(-1, 1)
    if snapshots.ndim != 2:
        raise ShapeMismatch(f"states must be a p x m matrix, got shape {snapshots.shape}")
    if snapshots.shape[0] < 2:
        raise TooFewSnapshots(f"need at least 2 snapshots, got {snapshots.shape[0]}")
    if not dt > 0:
        raise InvalidConfig(f"dt must be > 0, got {dt}")
    derivatives = np.empty_like(snapshots)
    derivatives[:-1] = np.diff(snapshots, axis=0) / dt
    derivatives[-1] = derivatives[-2]
    return derivatives


def fit_dynamics(states, dt: float, library_degree: int = 2, threshold: float = 0.05,
                 max_iter: int = 20, ridge_eps: float = 1e-10, derivatives=None,
                 feature_names: Optional[Sequence[str]] = None) -> List[SparseModel]:
    """
    One sparse model per state dimension, dx_k/dt = Psi(x) . xi_k, sharing a
    single design matrix over the raw (unstandardized) states.

    A constant trajectory has zero derivatives everywhere; STLS then removes
    every term and NoActiveTerms is raised.
    """
    snapshots = np.asarray(states, dtype=float)
    if snapshots.ndim == 1:
        snapshots = snapshots.reshape(-1, 1)
    if derivatives is None:
        derivatives = finite_difference(snapshots, dt)
    else:
        derivatives = np.asarray(derivatives, dtype=float).reshape(snapshots.shape[0], -1)
        if derivatives.shape != snapshots.shape:
            raise ShapeMismatch(f"derivatives shape {derivatives.shape} differs from states {snapshots.shape}")

    num_vars = snapshots.shape[1]
    names = tuple(feature_names or (f"x{i + 1}" for i in range(num_vars)))
    library = build_library(num_vars, library_degree)
    design = evaluate_library(library, snapshots)
    standardizer = Standardizer.identity(num_vars)

    models = []
    for dimension in range(num_vars):
        result = stls(design, derivatives[:, dimension], threshold, max_iter, ridge_eps)
        models.append(SparseModel(
            library=library,
            coefficients=result.coefficients,
            threshold=threshold,
            ridge_eps=ridge_eps,
            standardizer=standardizer,
            iterations_used=result.iterations,
            feature_names=names,
            trained_at=deterministic_timestamp(),
        ))
        logger.info("d%s/dt: %d active terms", names[dimension], models[-1].nnz)
    return models


# --- persistence ---------------------------------------------------------------

def save_model(model: SparseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(model.to_dict(), handle, indent=2)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    return path


def load_model(path: Union[str, Path]) -> SparseModel:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}")
    return SparseModel.from_dict(data)
