#!/usr/bin/env python3
"""
Charge-cycle ingestion

Parses CC-CV charge logs, splits each charge into its constant-current and
constant-voltage phases, counts coulombs and turns the smoothed capacity
history of every cell into SOH labels.
"""

import logging
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.ndimage import convolve1d

from soh_errors import (
    DataError,
    DegenerateCv,
    DuplicateCycle,
    EmptyFile,
    EmptyInput,
    ImplausibleCapacity,
    InsufficientSamples,
    InvalidConfig,
    InvalidDischarge,
    InvalidKernel,
    IoFailure,
    LengthMismatch,
    MalformedRow,
    NegativeCurrent,
    NoCvPhase,
    NonMonotonicTime,
    NonPositiveNominal,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

CYCLE_COLUMNS = ["cell_id", "cycle_index", "time_s", "voltage_V", "current_A"]
LABEL_COLUMNS = ["cell_id", "cycle_index", "capacity_Ah", "smoothed_capacity_Ah", "soh_pct"]

SECONDS_PER_HOUR = 3600.0
VOLTAGE_BOUNDS_V = (0.0, 6.0)
CURRENT_BOUNDS_A = (0.0, 10.0)
MAX_CAPACITY_RATIO = 1.2

PathLike = Union[str, Path]


def config_from_dict(cls, data: Dict, section: str):
    """Build a config dataclass from a plain dict, refusing unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidConfig(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidConfig(f"{section}: unknown keys {', '.join(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class ProtocolConfig:
    """CC-CV protocol constants (lab condition table: 1.25 A CC to 4.2 V, 125 mA CV cut-off)."""
    nominal_capacity_Ah: float = 2.0
    nominal_voltage_V: float = 3.7
    cv_setpoint_V: float = 4.2
    cc_current_A: float = 1.25
    cv_cutoff_A: float = 0.125
    cc_voltage_tolerance_V: float = 0.01
    cv_current_tolerance_A: float = 0.05

    def __post_init__(self):
        for item in fields(self):
            value = getattr(self, item.name)
            if not (isinstance(value, (int, float)) and value > 0):
                raise InvalidConfig(f"protocol.{item.name} must be > 0, got {value!r}")
        if self.cv_cutoff_A >= self.cc_current_A:
            raise InvalidConfig(
                f"protocol.cv_cutoff_A ({self.cv_cutoff_A}) must be below cc_current_A ({self.cc_current_A})"
            )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "ProtocolConfig":
        return config_from_dict(cls, data, "protocol")


def _frozen_array(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != 1:
        raise ShapeMismatch(f"{name} must be one-dimensional, got shape {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SampleTrace:
    """Time-ordered (time, voltage, current) samples. Arrays are read-only."""
    time_s: np.ndarray
    voltage_V: np.ndarray
    current_A: np.ndarray

    def __post_init__(self):
        for name in ("time_s", "voltage_V", "current_A"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), name))
        if not (self.time_s.size == self.voltage_V.size == self.current_A.size):
            raise LengthMismatch(
                f"sample arrays differ in length: {self.time_s.size}, "
                f"{self.voltage_V.size}, {self.current_A.size}"
            )
        if self.time_s.size > 1 and np.any(np.diff(self.time_s) <= 0):
            raise NonMonotonicTime("time_s must be strictly increasing")

    def __len__(self) -> int:
        return int(self.time_s.size)

    @property
    def duration_s(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(self.time_s[-1] - self.time_s[0])

    def samples(self) -> np.ndarray:
        """Samples as an n x 3 array of (time_s, voltage_V, current_A)."""
        return np.column_stack([self.time_s, self.voltage_V, self.current_A])


@dataclass(frozen=True, eq=False)
class ChargeCycle(SampleTrace):
    cell_id: str = ""
    cycle_index: int = 0

    def __post_init__(self):
        super().__post_init__()
        if len(self) == 0:
            raise EmptyInput(f"{self.cell_id} cycle {self.cycle_index}: no samples")
        if self.cycle_index < 0:
            raise DataError(f"{self.cell_id}: cycle_index must be non-negative, got {self.cycle_index}")
        low_v, high_v = VOLTAGE_BOUNDS_V
        if np.any(self.voltage_V <= low_v) or np.any(self.voltage_V >= high_v):
            raise DataError(f"{self.cell_id} cycle {self.cycle_index}: voltage outside ({low_v}, {high_v}) V")
        low_i, high_i = CURRENT_BOUNDS_A
        if np.any(self.current_A < low_i) or np.any(self.current_A > high_i):
            raise DataError(f"{self.cell_id} cycle {self.cycle_index}: current outside [{low_i}, {high_i}] A")

    @property
    def key(self) -> Tuple[str, int]:
        return (self.cell_id, self.cycle_index)


@dataclass(frozen=True, eq=False)
class CvSegment(SampleTrace):
    """Constant-voltage part of a charge with time re-zeroed at its first sample."""
    parent_cycle: int = 0
    cell_id: str = ""
    start_time_s: float = 0.0


@dataclass(frozen=True)
class CapacityLabel:
    cell_id: str
    cycle_index: int
    capacity_Ah: float
    smoothed_capacity_Ah: float
    soh_pct: float


# --- parsing -----------------------------------------------------------------

_PARSER_LINE = re.compile(r"line (\d+)")


def _locate_bad_row(path: Path) -> None:
    """Slow path: re-read as text and raise MalformedRow at the first bad line."""
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False,
                      encoding="utf-8")
    for position, row in enumerate(raw.itertuples(index=False)):
        line_number = position + 2
        values = list(row)
        if any(value is None or (isinstance(value, float) and math.isnan(value)) for value in values):
            raise MalformedRow(f"expected {len(CYCLE_COLUMNS)} fields", line_number)
        cell_id, cycle_index, time_s, voltage, current = (str(value).strip() for value in values)
        if not cell_id:
            raise MalformedRow("empty cell_id", line_number)
        try:
            index_value = int(cycle_index)
        except ValueError:
            raise MalformedRow(f"cycle_index {cycle_index!r} is not an integer", line_number)
        if index_value < 0:
            raise MalformedRow(f"cycle_index {index_value} is negative", line_number)
        for name, text in (("time_s", time_s), ("voltage_V", voltage), ("current_A", current)):
            try:
                number = float(text)
            except ValueError:
                raise MalformedRow(f"{name} {text!r} is not a number", line_number)
            if not math.isfinite(number):
                raise MalformedRow(f"{name} {text!r} is not finite", line_number)
    raise MalformedRow("unparseable content")


def _read_cycle_frame(path: Path) -> pd.DataFrame:
    dtypes = {"cell_id": str, "cycle_index": "int64", "time_s": float,
              "voltage_V": float, "current_A": float}
    try:
        frame = pd.read_csv(path, dtype=dtypes, skip_blank_lines=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path}: file is empty")
    except pd.errors.ParserError as exc:
        match = _PARSER_LINE.search(str(exc))
        raise MalformedRow(f"{path}: wrong field count", int(match.group(1)) if match else None)
    except UnicodeDecodeError as exc:
        raise MalformedRow(f"{path}: not UTF-8 ({exc.reason})")
    except (ValueError, TypeError):
        _check_header(path)
        _locate_bad_row(path)
    _check_header(path, list(frame.columns))
    if frame.empty:
        raise EmptyFile(f"{path}: header only, no samples")
    samples = frame[["time_s", "voltage_V", "current_A"]].to_numpy()
    if frame.isna().any().any() or (frame["cycle_index"] < 0).any() or not np.isfinite(samples).all():
        _locate_bad_row(path)
    return frame


def _check_header(path: Path, columns: Optional[List[str]] = None) -> None:
    if columns is None:
        with open(path, "r", encoding="utf-8") as handle:
            columns = [name.strip() for name in handle.readline().strip().split(",")]
    if [str(name).strip() for name in columns] != CYCLE_COLUMNS:
        raise MalformedRow(f"{path}: header must be {','.join(CYCLE_COLUMNS)}", 1)


def parse_cycles(path: PathLike, config: Optional[ProtocolConfig] = None) -> List[ChargeCycle]:
    """
    Read one cycle CSV into ChargeCycles, one per (cell_id, cycle_index),
    ordered by cell then cycle.

    Rows of different cycles may interleave; inside one cycle time must
    strictly increase in file order.
    """
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"cycle file not found: {path}")

    frame = _read_cycle_frame(path)
    frame["cell_id"] = frame["cell_id"].str.strip()
    frame["line"] = np.arange(len(frame)) + 2

    low_v, high_v = VOLTAGE_BOUNDS_V
    low_i, high_i = CURRENT_BOUNDS_A
    bad = ((frame["voltage_V"] <= low_v) | (frame["voltage_V"] >= high_v)
           | (frame["current_A"] < low_i) | (frame["current_A"] > high_i))
    if bad.any():
        row = frame[bad].iloc[0]
        raise MalformedRow(
            f"sample outside sanity bounds (voltage {row['voltage_V']} V, current {row['current_A']} A)",
            int(row["line"]),
        )

    cycles = []
    for (cell_id, cycle_index), group in frame.groupby(["cell_id", "cycle_index"], sort=True):
        times = group["time_s"].to_numpy()
        steps = np.diff(times)
        if np.any(steps <= 0):
            offending = int(group["line"].to_numpy()[int(np.argmax(steps <= 0)) + 1])
            raise NonMonotonicTime(
                f"{path}: line {offending}: time regresses within {cell_id} cycle {cycle_index}"
            )
        cycle = ChargeCycle(
            time_s=times,
            voltage_V=group["voltage_V"].to_numpy(),
            current_A=group["current_A"].to_numpy(),
            cell_id=str(cell_id),
            cycle_index=int(cycle_index),
        )
        if config is not None and cycle.current_A.max() > config.cc_current_A + config.cv_current_tolerance_A:
            logger.warning("%s cycle %d: current peaks at %.4f A, above the %.4f A CC level",
                           cycle.cell_id, cycle.cycle_index, cycle.current_A.max(), config.cc_current_A)
        cycles.append(cycle)

    logger.info("Parsed %d cycles from %s", len(cycles), path)
    return cycles


def discover_cycle_files(path: PathLike) -> List[Path]:
    """A file is returned as-is; a directory yields its cycle-schema CSVs sorted by name."""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise IoFailure(f"no such file or directory: {path}")

    found = []
    header = ",".join(CYCLE_COLUMNS)
    for candidate in sorted(path.glob("*.csv")):
        try:
            with open(candidate, "r", encoding="utf-8") as handle:
                first_line = handle.readline().strip()
        except (OSError, UnicodeDecodeError) as exc:
            logger.warning("Skipping unreadable file %s: %s", candidate, exc)
            continue
        if first_line == header:
            found.append(candidate)
        else:
            logger.info("Skipping %s: not a cycle log", candidate.name)
    if not found:
        raise IoFailure(f"no cycle CSV files in {path}")
    return found


def load_cycles(paths: Iterable[PathLike], config: Optional[ProtocolConfig] = None) -> List[ChargeCycle]:
    """Parse several files; the same (cell_id, cycle_index) may not appear twice."""
    cycles: Dict[Tuple[str, int], ChargeCycle] = {}
    for path in paths:
        for cycle in parse_cycles(path, config):
            if cycle.key in cycles:
                raise DuplicateCycle(f"{cycle.cell_id} cycle {cycle.cycle_index} appears in more than one file")
            cycles[cycle.key] = cycle
    return [cycles[key] for key in sorted(cycles)]


# --- phase split and capacity ------------------------------------------------

def split_cc_cv(cycle: ChargeCycle, config: ProtocolConfig) -> Tuple[SampleTrace, CvSegment]:
    """
    CV starts at the first sample at the voltage set-point (within ε_V) whose
    current already sits below the CC level (by more than ε_I). Everything
    before it is CC.
    """
    voltage, current = cycle.voltage_V, cycle.current_A
    at_setpoint = voltage >= config.cv_setpoint_V - config.cc_voltage_tolerance_V
    if not at_setpoint.any():
        raise NoCvPhase(
            f"{cycle.cell_id} cycle {cycle.cycle_index}: voltage peaks at {voltage.max():.4f} V, "
            f"set-point {config.cv_setpoint_V} V never reached"
        )
    in_cv = at_setpoint & (current < config.cc_current_A - config.cv_current_tolerance_A)
    if not in_cv.any():
        raise NoCvPhase(f"{cycle.cell_id} cycle {cycle.cycle_index}: current never decays at the set-point")

    start = int(np.argmax(in_cv))
    if len(cycle) - start < 3:
        raise DegenerateCv(
            f"{cycle.cell_id} cycle {cycle.cycle_index}: CV phase has {len(cycle) - start} samples, need 3"
        )

    cc = SampleTrace(cycle.time_s[:start], voltage[:start], current[:start])
    start_time = float(cycle.time_s[start])
    cv = CvSegment(
        time_s=cycle.time_s[start:] - start_time,
        voltage_V=voltage[start:],
        current_A=current[start:],
        parent_cycle=cycle.cycle_index,
        cell_id=cycle.cell_id,
        start_time_s=start_time,
    )
    return cc, cv


def coulomb_count(time_s: Sequence[float], current_A: Sequence[float]) -> float:
    """Charge in Ah: trapezoidal integral of current over time."""
    time_s = np.asarray(time_s, dtype=float)
    current_A = np.asarray(current_A, dtype=float)
    if time_s.shape != current_A.shape:
        raise LengthMismatch(f"{time_s.size} times but {current_A.size} currents")
    if time_s.size < 2:
        raise InsufficientSamples(f"coulomb counting needs 2 samples, got {time_s.size}")
    if np.any(np.diff(time_s) <= 0):
        raise NonMonotonicTime("time_s must be strictly increasing")
    if np.any(current_A < 0):
        raise NegativeCurrent("charge currents must be non-negative")
    return float(trapezoid(current_A, time_s)) / SECONDS_PER_HOUR


def charge_capacity(cycle: ChargeCycle) -> float:
    """Whole-charge capacity: CC and CV integrals together."""
    return coulomb_count(cycle.time_s, cycle.current_A)


def gaussian_smooth(values: Sequence[float], sigma: float = 3.0, radius: Optional[int] = None) -> np.ndarray:
    """
    Gaussian filter over a capacity history. Near the ends the kernel is
    truncated and its weights renormalized; no padding values are invented.
    """
    if not sigma > 0:
        raise InvalidKernel(f"sigma must be > 0, got {sigma}")
    if radius is None:
        radius = int(math.ceil(3 * sigma))
    if int(radius) != radius or radius < 1:
        raise InvalidKernel(f"radius must be an integer >= 1, got {radius}")
    radius = int(radius)

    series = np.asarray(values, dtype=float)
    if series.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D sequence, got shape {series.shape}")
    if series.size == 0:
        raise EmptyInput("cannot smooth an empty sequence")

    offsets = np.arange(-radius, radius + 1, dtype=float)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)

    # smoothing deviations from the first value keeps constant input exact
    base = series[0]
    numerator = convolve1d(series - base, weights, mode="constant", cval=0.0)
    denominator = convolve1d(np.ones_like(series), weights, mode="constant", cval=0.0)
    smoothed = base + numerator / denominator
    return np.clip(smoothed, series.min(), series.max())


def to_soh(capacity_Ah: float, nominal_capacity_Ah: float) -> float:
    if not nominal_capacity_Ah > 0:
        raise NonPositiveNominal(f"nominal capacity must be > 0, got {nominal_capacity_Ah}")
    if capacity_Ah < 0:
        raise ImplausibleCapacity(f"capacity must be >= 0, got {capacity_Ah}")
    return capacity_Ah / nominal_capacity_Ah * 100.0


def to_soc(chargeable_Ah: float, discharged_Ah: float) -> float:
    if not chargeable_Ah > 0:
        raise NonPositiveNominal(f"chargeable capacity must be > 0, got {chargeable_Ah}")
    if discharged_Ah < 0 or discharged_Ah > chargeable_Ah:
        raise InvalidDischarge(f"discharged {discharged_Ah} Ah outside [0, {chargeable_Ah}] Ah")
    return (chargeable_Ah - discharged_Ah) / chargeable_Ah * 100.0


def label_capacities(cycles: Iterable[ChargeCycle], config: ProtocolConfig,
                     sigma: float = 3.0, radius: Optional[int] = None) -> List[CapacityLabel]:
    """Coulomb count every charge, smooth each cell's pooled history and convert to SOH."""
    by_cell: Dict[str, List[ChargeCycle]] = {}
    for cycle in cycles:
        by_cell.setdefault(cycle.cell_id, []).append(cycle)

    limit = MAX_CAPACITY_RATIO * config.nominal_capacity_Ah
    labels = []
    for cell_id in sorted(by_cell):
        ordered = sorted(by_cell[cell_id], key=lambda c: c.cycle_index)
        capacities = np.array([charge_capacity(c) for c in ordered])
        bad = (capacities <= 0) | (capacities > limit)
        if bad.any():
            culprit = ordered[int(np.argmax(bad))]
            raise ImplausibleCapacity(
                f"{cell_id} cycle {culprit.cycle_index}: capacity {capacities[bad][0]:.4f} Ah "
                f"outside (0, {limit:.3f}] Ah"
            )
        smoothed = gaussian_smooth(capacities, sigma, radius)
        for cycle, raw, smooth in zip(ordered, capacities, smoothed):
            labels.append(CapacityLabel(
                cell_id=cell_id,
                cycle_index=cycle.cycle_index,
                capacity_Ah=float(raw),
                smoothed_capacity_Ah=float(smooth),
                soh_pct=to_soh(float(smooth), config.nominal_capacity_Ah),
            ))
    return labels


def write_capacity_labels(labels: Sequence[CapacityLabel], path: PathLike) -> Path:
    path = Path(path)
    frame = pd.DataFrame([asdict(label) for label in labels], columns=LABEL_COLUMNS)
    try:
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    return path
