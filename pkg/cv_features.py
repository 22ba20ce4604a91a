#!/usr/bin/env python3
"""
CV-segment features and the correlation gate.

Seven inputs per charge: mean, standard deviation, skewness and kurtosis of
the CV current, the current drop across the segment, the CV charge and the
CV duration.
"""

import json
import logging
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from cycle_ingest import ChargeCycle, CvSegment, ProtocolConfig, coulomb_count, split_cc_cv
from soh_errors import (
    ConstantLabel,
    InvalidConfig,
    IoFailure,
    LengthMismatch,
    ShapeMismatch,
    TooShort,
    ZeroVariance,
)

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("mu", "sigma", "skew", "kur", "delta_i", "c_cv", "t_dur")
MIN_SAMPLES = 3


@dataclass(frozen=True)
class FeatureVector:
    mu: float
    sigma: float
    skew: float
    kur: float
    delta_i: float
    c_cv: float
    t_dur: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    def to_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, astuple(self)))


@dataclass(frozen=True)
class CorrelationReport:
    """Pearson ρ of every feature against SOH and the features passing |ρ| ≥ gate."""
    rho: Dict[str, float]
    selected: Tuple[str, ...]
    gate: float
    constant: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict:
        return {
            "rho": dict(self.rho),
            "selected": list(self.selected),
            "gate": self.gate,
            "constant": list(self.constant),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CorrelationReport":
        return cls(
            rho={str(k): float(v) for k, v in data["rho"].items()},
            selected=tuple(data["selected"]),
            gate=float(data["gate"]),
            constant=tuple(data.get("constant", ())),
        )


def _series(values, name: str = "series") -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim != 1:
        raise ShapeMismatch(f"{name} must be one-dimensional, got shape {array.shape}")
    if array.size < MIN_SAMPLES:
        raise TooShort(f"{name} needs at least {MIN_SAMPLES} samples, got {array.size}")
    return array


def _standardized(series: np.ndarray) -> np.ndarray:
    if np.ptp(series) == 0:
        raise ZeroVariance("series is constant")
    mu, sigma = sample_stats(series)
    return (series - mu) / sigma


def sample_stats(series: Sequence[float]) -> Tuple[float, float]:
    """Mean and (n-1)-divisor standard deviation."""
    values = _series(series)
    return float(np.mean(values)), float(np.std(values, ddof=1))


def skewness(series: Sequence[float]) -> float:
    """Sum of cubed z-scores over (n - 1)."""
    values = _series(series)
    z = _standardized(values)
    return float(np.sum(z ** 3) / (values.size - 1))


def kurtosis(series: Sequence[float]) -> float:
    """Excess kurtosis: n / ((n-1)(n-2)) times the sum of z^4, minus 3."""
    values = _series(series)
    n = values.size
    z = _standardized(values)
    return float(n / ((n - 1) * (n - 2)) * np.sum(z ** 4) - 3.0)


def extract_features(segment: CvSegment, config: Optional[ProtocolConfig] = None) -> FeatureVector:
    current = _series(segment.current_A, "CV current")
    time_s = segment.time_s
    mu, sigma = sample_stats(current)

    if config is not None:
        offset = abs(float(segment.voltage_V[0]) - config.cv_setpoint_V)
        if offset > config.cc_voltage_tolerance_V:
            logger.warning("%s cycle %s: CV segment starts %.4f V off the set-point",
                           segment.cell_id, segment.parent_cycle, offset)

    return FeatureVector(
        mu=mu,
        sigma=sigma,
        skew=skewness(current),
        kur=kurtosis(current),
        delta_i=float(current[0] - current[-1]),
        c_cv=coulomb_count(time_s, current),
        t_dur=float(time_s[-1] - time_s[0]),
    )


def cycle_features(cycle: ChargeCycle, config: ProtocolConfig) -> FeatureVector:
    _, segment = split_cc_cv(cycle, config)
    return extract_features(segment, config)


def build_feature_rows(cycles: Iterable[ChargeCycle],
                       config: ProtocolConfig) -> List[Tuple[Tuple[str, int], FeatureVector]]:
    """Features for every cycle, keyed by (cell_id, cycle_index). Errors propagate."""
    rows = [(cycle.key, cycle_features(cycle, config)) for cycle in cycles]
    logger.info("Extracted features for %d cycles", len(rows))
    return rows


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"pearson inputs differ in shape: {x.shape} vs {y.shape}")
    x = _series(x, "x")
    y = _series(y, "y")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ZeroVariance("pearson is undefined for a constant sequence")
    rho = stats.pearsonr(x, y)[0]
    return float(np.clip(rho, -1.0, 1.0))


def correlation_gate(dataset, gate: float = 0.8) -> CorrelationReport:
    """Keep the features whose |ρ| against SOH meets the gate, in feature order."""
    if not 0.0 <= gate <= 1.0:
        raise InvalidConfig(f"correlation gate must lie in [0, 1], got {gate}")
    features = np.asarray(dataset.features, dtype=float)
    labels = np.asarray(dataset.labels, dtype=float)
    if labels.size < MIN_SAMPLES:
        raise TooShort(f"correlation gate needs at least {MIN_SAMPLES} rows, got {labels.size}")
    if np.ptp(labels) == 0:
        raise ConstantLabel(f"SOH labels are constant at {labels[0]:.4f}%")

    rho: Dict[str, float] = {}
    constant = []
    for column, name in enumerate(dataset.feature_names):
        values = features[:, column]
        if np.ptp(values) == 0:
            logger.warning("Feature %s is constant across the training rows", name)
            rho[name] = 0.0
            constant.append(name)
            continue
        rho[name] = pearson(values, labels)

    selected = tuple(name for name in dataset.feature_names
                     if name not in constant and abs(rho[name]) >= gate)
    logger.info("Correlation gate %.2f selected %d of %d features", gate, len(selected), len(rho))
    return CorrelationReport(rho=rho, selected=selected, gate=float(gate), constant=tuple(constant))


def write_feature_matrix(rows: Sequence[Tuple[Tuple[str, int], FeatureVector]],
                         path: Union[str, Path],
                         soh_by_key: Optional[Dict[Tuple[str, int], float]] = None) -> Path:
    """Feature CSV; soh_pct is left blank for cycles without a label."""
    path = Path(path)
    soh_by_key = soh_by_key or {}
    records = []
    for (cell_id, cycle_index), vector in rows:
        record = {"cell_id": cell_id, "cycle_index": cycle_index}
        record.update(vector.to_dict())
        record["soh_pct"] = soh_by_key.get((cell_id, cycle_index))
        records.append(record)
    frame = pd.DataFrame(records, columns=["cell_id", "cycle_index", *FEATURE_NAMES, "soh_pct"])
    try:
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    return path


def write_correlation_report(report: CorrelationReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(report.to_dict(), handle, indent=2)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    return path
