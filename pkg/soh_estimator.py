#!/usr/bin/env python3
"""
SOH estimation pipeline.

Training: parse -> CC/CV split -> capacity labels (coulomb count, smoothing,
SOH) -> CV features -> correlation gate -> standardize -> library -> STLS.
Estimation runs the same feature path on unlabeled charges and evaluates
the sparse model once per cycle.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from cv_features import (
    FEATURE_NAMES,
    CorrelationReport,
    build_feature_rows,
    correlation_gate,
    cycle_features,
)
from cycle_ingest import (
    ChargeCycle,
    ProtocolConfig,
    config_from_dict,
    discover_cycle_files,
    label_capacities,
    load_cycles,
)
from sindy_regression import LabeledDataset, SparseModel, fit_sparse_model
from soh_errors import (
    DataError,
    InsufficientData,
    InvalidConfig,
    IoFailure,
    NoFeaturesSelected,
    SchemaVersionMismatch,
)
from soh_evaluation import MetricReport, metrics

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "sindy-soh/1"
ESTIMATOR_SUFFIX = ".sindy-soh.json"
ESTIMATE_COLUMNS = ["cell_id", "cycle_index", "soh_est_pct"]
MIN_CYCLES_PER_CELL = 3

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PipelineConfig:
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    smoothing_sigma: float = 3.0
    smoothing_radius: Optional[int] = None
    library_degree: int = 3
    stls_threshold: float = 0.05
    # when set, stls_threshold is a fraction of the training-label standard deviation
    stls_threshold_relative: bool = False
    stls_max_iter: int = 20
    ridge_eps: float = 1e-10
    correlation_gate: float = 0.8
    holdout: Tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.protocol, dict):
            object.__setattr__(self, "protocol", ProtocolConfig.from_dict(self.protocol))
        object.__setattr__(self, "holdout", tuple(str(cell) for cell in self.holdout))
        if self.library_degree < 1:
            raise InvalidConfig(f"pipeline.library_degree must be >= 1, got {self.library_degree}")
        if not 0.0 <= self.correlation_gate <= 1.0:
            raise InvalidConfig(f"pipeline.correlation_gate must lie in [0, 1], got {self.correlation_gate}")
        if self.stls_threshold < 0 or self.stls_max_iter < 1 or self.ridge_eps < 0:
            raise InvalidConfig("pipeline STLS settings need threshold >= 0, max_iter >= 1, ridge_eps >= 0")
        if not isinstance(self.stls_threshold_relative, bool):
            raise InvalidConfig(f"pipeline.stls_threshold_relative must be true or false, got {self.stls_threshold_relative!r}")
        if not self.smoothing_sigma > 0:
            raise InvalidConfig(f"pipeline.smoothing_sigma must be > 0, got {self.smoothing_sigma}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["protocol"] = self.protocol.to_dict()
        data["holdout"] = list(self.holdout)
        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "PipelineConfig":
        return config_from_dict(cls, data, "pipeline")


@dataclass(frozen=True)
class TrainedEstimator:
    model: SparseModel
    report: CorrelationReport
    train_metrics: MetricReport
    config: PipelineConfig

    def __post_init__(self):
        if tuple(self.model.feature_names) != tuple(self.report.selected):
            raise SchemaVersionMismatch(
                f"model features {list(self.model.feature_names)} differ from the gate selection "
                f"{list(self.report.selected)}"
            )

    def to_dict(self) -> Dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "pipeline_config": self.config.to_dict(),
            "correlation_report": self.report.to_dict(),
            "train_metrics": self.train_metrics.to_dict(),
        }


@dataclass(frozen=True)
class SohEstimate:
    cell_id: str
    cycle_index: int
    soh_est_pct: float


@dataclass(frozen=True)
class EstimateFailure:
    cell_id: str
    cycle_index: int
    reason: str


@dataclass(frozen=True)
class EstimateResult:
    estimates: Tuple[SohEstimate, ...]
    failures: Tuple[EstimateFailure, ...]


def _expand_sources(sources: Union[PathLike, Iterable[PathLike]]) -> List[Path]:
    if isinstance(sources, (str, Path)):
        sources = [sources]
    files: List[Path] = []
    for source in sources:
        files.extend(discover_cycle_files(source))
    return files


def _as_cycles(source, config: PipelineConfig) -> List[ChargeCycle]:
    if isinstance(source, (str, Path)) or (
            isinstance(source, (list, tuple)) and source and isinstance(source[0], (str, Path))):
        return load_cycles(_expand_sources(source), config.protocol)
    return sorted(source, key=lambda c: c.key)


def build_labeled_dataset(cycles: Sequence[ChargeCycle], config: PipelineConfig) -> LabeledDataset:
    """Feature rows in FEATURE_NAMES order labeled with smoothed SOH."""
    labels = label_capacities(cycles, config.protocol, config.smoothing_sigma, config.smoothing_radius)
    soh = {(label.cell_id, label.cycle_index): label.soh_pct for label in labels}
    rows = build_feature_rows(sorted(cycles, key=lambda c: c.key), config.protocol)
    return LabeledDataset(
        features=np.array([vector.as_array() for _, vector in rows]).reshape(len(rows), len(FEATURE_NAMES)),
        labels=np.array([soh[key] for key, _ in rows]),
        provenance=tuple(key for key, _ in rows),
        feature_names=FEATURE_NAMES,
    )


def stls_threshold(config: PipelineConfig, labels) -> float:
    """Hard STLS threshold in label units for this training set"""
    if config.stls_threshold_relative:
        return config.stls_threshold * float(np.std(labels))
    return config.stls_threshold


def train_on_cycles(cycles: Sequence[ChargeCycle], config: PipelineConfig,
                    trained_at: Optional[str] = None) -> TrainedEstimator:
    held = set(config.holdout)
    training = [cycle for cycle in cycles if cycle.cell_id not in held]
    counts: Dict[str, int] = {}
    for cycle in training:
        counts[cycle.cell_id] = counts.get(cycle.cell_id, 0) + 1
    if not any(count >= MIN_CYCLES_PER_CELL for count in counts.values()):
        raise InsufficientData(
            f"training needs a non-holdout cell with at least {MIN_CYCLES_PER_CELL} cycles; "
            f"got {counts or 'none'}"
        )
    logger.info("Training on %d cycles from %d cells (holdout: %s)",
                len(training), len(counts), ", ".join(sorted(held)) or "none")

    dataset = build_labeled_dataset(training, config)
    report = correlation_gate(dataset, config.correlation_gate)
    if not report.selected:
        raise NoFeaturesSelected(
            f"no feature reaches |rho| >= {config.correlation_gate}: "
            + ", ".join(f"{name}={rho:.3f}" for name, rho in report.rho.items())
        )

    selected = dataset.select(report.selected)
    model = fit_sparse_model(
        selected,
        library_degree=config.library_degree,
        threshold=stls_threshold(config, selected.labels),
        max_iter=config.stls_max_iter,
        ridge_eps=config.ridge_eps,
        trained_at=trained_at,
    )
    train_metrics = metrics(model.predict(selected.features), selected.labels)
    logger.info("Training fit: MAE %.4f, RMSE %.4f, MAX %.4f",
                train_metrics.mae, train_metrics.rmse, train_metrics.max_err)
    return TrainedEstimator(model, report, train_metrics, config)


def train(cycle_files: Union[PathLike, Iterable[PathLike]], config: Optional[PipelineConfig] = None,
          trained_at: Optional[str] = None) -> TrainedEstimator:
    config = config or PipelineConfig()
    cycles = load_cycles(_expand_sources(cycle_files), config.protocol)
    return train_on_cycles(cycles, config, trained_at)


def estimate(estimator: TrainedEstimator, source) -> EstimateResult:
    """
    Per-cycle SOH for cycle files or in-memory cycles. Cycles whose CV phase
    cannot be extracted are reported as failures; the rest are still estimated.
    """
    cycles = _as_cycles(source, estimator.config)
    columns = [FEATURE_NAMES.index(name) for name in estimator.report.selected]

    keys, rows, failures = [], [], []
    for cycle in cycles:
        try:
            vector = cycle_features(cycle, estimator.config.protocol)
        except DataError as exc:
            logger.warning("Skipping %s cycle %d: %s", cycle.cell_id, cycle.cycle_index, exc)
            failures.append(EstimateFailure(cycle.cell_id, cycle.cycle_index, str(exc)))
            continue
        keys.append(cycle.key)
        rows.append(vector.as_array()[columns])

    estimates = []
    if rows:
        predictions = estimator.model.predict(np.vstack(rows))
        estimates = [SohEstimate(cell, index, float(value)) for (cell, index), value in zip(keys, predictions)]
    logger.info("Estimated %d cycles, %d failed", len(estimates), len(failures))
    return EstimateResult(tuple(estimates), tuple(failures))


def write_estimates(result: EstimateResult, path: PathLike) -> Path:
    path = Path(path)
    frame = pd.DataFrame([asdict(e) for e in result.estimates], columns=ESTIMATE_COLUMNS)
    try:
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    return path


def save(estimator: TrainedEstimator, path: PathLike) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(estimator.to_dict(), handle, indent=2)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    logger.info("Saved estimator to %s", path)
    return path


def load(path: PathLike) -> TrainedEstimator:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise SchemaVersionMismatch(f"{path}: expected a JSON object")

    found = data.get("schema_version")
    if found != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{path}: schema version {found!r}, this build reads {SCHEMA_VERSION!r}")
    missing = [key for key in ("model", "pipeline_config", "correlation_report", "train_metrics")
               if key not in data]
    if missing:
        raise SchemaVersionMismatch(f"{path}: {SCHEMA_VERSION} file lacks {', '.join(missing)}")

    try:
        report = CorrelationReport.from_dict(data["correlation_report"])
        train_metrics = MetricReport(**data["train_metrics"])
    except (KeyError, TypeError) as exc:
        raise SchemaVersionMismatch(f"{path}: malformed {SCHEMA_VERSION} section ({exc})")
    return TrainedEstimator(
        model=SparseModel.from_dict(data["model"]),
        report=report,
        train_metrics=train_metrics,
        config=PipelineConfig.from_dict(data["pipeline_config"]),
    )
