#!/usr/bin/env python3
"""
Synthetic CC-CV aging fleet.

Each cell fades linearly (plus seeded noise) while its CV time constant and
CC ohmic drop grow with cycle count. The generated logs use the same schema
as lab data, so they exercise the whole estimation pipeline with a known
ground truth.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from werkzeug.utils import secure_filename

from cycle_ingest import CYCLE_COLUMNS, SECONDS_PER_HOUR, ChargeCycle, ProtocolConfig, config_from_dict
from soh_errors import DataError, InvalidConfig, IoFailure

logger = logging.getLogger(__name__)

TRUTH_FILE = "ground_truth.csv"
TRUTH_COLUMNS = ["cell_id", "cycle_index", "true_capacity_Ah", "true_soh_pct"]


@dataclass(frozen=True)
class SimConfig:
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    num_cells: int = 8
    cycles_per_cell: int = 300
    fade_rate: float = 8e-4
    fade_noise_sd: float = 0.15
    resistance_growth: float = 3e-3
    cv_tau0_s: float = 300.0
    sample_dt_s: float = 1.0
    seed: int = 7
    cc_log_dt_s: float = 30.0
    cc_start_voltage_V: float = 3.2
    ohmic_resistance_ohm: float = 0.05
    cv_entry_drop_A: float = 0.1
    cv_entry_drop_growth: float = 0.01

    def __post_init__(self):
        if isinstance(self.protocol, dict):
            object.__setattr__(self, "protocol", ProtocolConfig.from_dict(self.protocol))
        if self.num_cells < 1:
            raise InvalidConfig(f"simulation.num_cells must be >= 1, got {self.num_cells}")
        if self.cycles_per_cell < 2:
            raise InvalidConfig(f"simulation.cycles_per_cell must be >= 2, got {self.cycles_per_cell}")
        for name in ("fade_rate", "fade_noise_sd", "resistance_growth", "ohmic_resistance_ohm",
                     "cv_entry_drop_A", "cv_entry_drop_growth"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"simulation.{name} must be >= 0, got {getattr(self, name)}")
        for name in ("cv_tau0_s", "sample_dt_s", "cc_log_dt_s", "cc_start_voltage_V"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"simulation.{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidConfig(f"simulation.seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["protocol"] = self.protocol.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "SimConfig":
        return config_from_dict(cls, data, "simulation")


@dataclass(frozen=True)
class TruthRecord:
    cell_id: str
    cycle_index: int
    true_capacity_Ah: float
    true_soh_pct: float
    cv_tau_s: float
    cv_duration_s: float
    cv_entry_current_A: float


@dataclass(frozen=True)
class GroundTruth:
    records: Tuple[TruthRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def lookup(self) -> Dict[Tuple[str, int], TruthRecord]:
        return {(r.cell_id, r.cycle_index): r for r in self.records}

    def soh_by_key(self) -> Dict[Tuple[str, int], float]:
        return {(r.cell_id, r.cycle_index): r.true_soh_pct for r in self.records}

    def for_cell(self, cell_id: str) -> List[TruthRecord]:
        return [r for r in self.records if r.cell_id == cell_id]


def _sample_times(end: float, step: float, start: float) -> np.ndarray:
    """Grid start, start+step, ... closed by `end`; a grid point within 1e-3 step of `end` is dropped."""
    grid = np.arange(start, end, step)
    if grid.size and end - grid[-1] < 1e-3 * step:
        grid = grid[:-1]
    return np.append(grid, end)


def simulate_cycle(config: SimConfig, cycle_index: int, capacity_Ah: float) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Sample arrays of one CC-CV charge plus its CV parameters."""
    protocol = config.protocol
    aging = 1.0 + config.resistance_growth * cycle_index
    tau = config.cv_tau0_s * aging
    entry_current = protocol.cc_current_A - config.cv_entry_drop_A * (1.0 + config.cv_entry_drop_growth * cycle_index)
    if entry_current <= protocol.cv_cutoff_A:
        raise InvalidConfig(
            f"cycle {cycle_index}: CV entry current {entry_current:.4f} A is not above the cutoff "
            f"{protocol.cv_cutoff_A} A; lower cv_entry_drop_A or cv_entry_drop_growth"
        )

    cv_duration = tau * math.log(entry_current / protocol.cv_cutoff_A)
    cv_charge = tau * (entry_current - protocol.cv_cutoff_A) / SECONDS_PER_HOUR
    cc_charge = capacity_Ah - cv_charge
    if cc_charge <= 0:
        raise InvalidConfig(f"cycle {cycle_index}: CV phase alone holds {cv_charge:.4f} Ah of {capacity_Ah:.4f} Ah")
    cc_duration = cc_charge * SECONDS_PER_HOUR / protocol.cc_current_A

    start_voltage = config.cc_start_voltage_V + protocol.cc_current_A * config.ohmic_resistance_ohm * aging
    if start_voltage >= protocol.cv_setpoint_V:
        raise InvalidConfig(f"cycle {cycle_index}: CC starts at {start_voltage:.3f} V, above the set-point")

    # CC: constant current, voltage rising linearly with charge
    cc_time = _sample_times(cc_duration, config.cc_log_dt_s, 0.0)
    cc_voltage = start_voltage + (protocol.cv_setpoint_V - start_voltage) * cc_time / cc_duration
    cc_current = np.full(cc_time.size, protocol.cc_current_A)

    # CV: first-order decay that ends exactly at the cutoff
    cv_local = _sample_times(cv_duration, config.sample_dt_s, config.sample_dt_s)
    cv_current = entry_current * np.exp(-cv_local / tau)
    cv_current[-1] = protocol.cv_cutoff_A
    cv_voltage = np.full(cv_local.size, protocol.cv_setpoint_V)

    samples = {
        "time_s": np.concatenate([cc_time, cc_duration + cv_local]),
        "voltage_V": np.concatenate([cc_voltage, cv_voltage]),
        "current_A": np.concatenate([cc_current, cv_current]),
    }
    params = {"cv_tau_s": tau, "cv_duration_s": cv_duration, "cv_entry_current_A": entry_current}
    return samples, params


def simulate_cell(config: SimConfig, cell_number: int) -> Tuple[List[ChargeCycle], List[TruthRecord]]:
    cell_id = f"cell{cell_number}"
    rng = np.random.default_rng(config.seed ^ cell_number)
    nominal = config.protocol.nominal_capacity_Ah
    noise = rng.normal(0.0, config.fade_noise_sd, size=config.cycles_per_cell)

    cycles = []
    truth = []
    for k in range(config.cycles_per_cell):
        soh = 100.0 * (1.0 - config.fade_rate * k) + noise[k]
        capacity = min(soh / 100.0 * nominal, nominal)
        if capacity <= 0:
            raise InvalidConfig(f"{cell_id} cycle {k}: capacity faded to {capacity:.4f} Ah")
        samples, params = simulate_cycle(config, k, capacity)
        cycles.append(ChargeCycle(cell_id=cell_id, cycle_index=k, **samples))
        truth.append(TruthRecord(
            cell_id=cell_id,
            cycle_index=k,
            true_capacity_Ah=capacity,
            true_soh_pct=capacity / nominal * 100.0,
            **params,
        ))
    return cycles, truth


def simulate_fleet(config: SimConfig) -> Tuple[List[ChargeCycle], GroundTruth]:
    """Cells cell1..cellN; cell i draws from PCG64 seeded with seed XOR i."""
    cycles: List[ChargeCycle] = []
    records: List[TruthRecord] = []
    for cell_number in range(1, config.num_cells + 1):
        cell_cycles, cell_truth = simulate_cell(config, cell_number)
        cycles.extend(cell_cycles)
        records.extend(cell_truth)
    logger.info("Simulated %d cells x %d cycles (seed %d)", config.num_cells, config.cycles_per_cell, config.seed)
    return cycles, GroundTruth(tuple(records))


def export_fleet(cycles: List[ChargeCycle], truth: GroundTruth, directory: Union[str, Path]) -> List[Path]:
    """One cycle CSV per cell plus ground_truth.csv; returns the written paths."""
    directory = Path(directory)
    by_cell: Dict[str, List[ChargeCycle]] = {}
    for cycle in cycles:
        by_cell.setdefault(cycle.cell_id, []).append(cycle)

    written = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for cell_id in sorted(by_cell):
            filename = secure_filename(f"{cell_id}.csv")
            if not filename or filename == TRUTH_FILE:
                raise DataError(f"cell id {cell_id!r} does not give a usable file name")
            frames = [
                pd.DataFrame({
                    "cell_id": cycle.cell_id,
                    "cycle_index": cycle.cycle_index,
                    "time_s": cycle.time_s,
                    "voltage_V": cycle.voltage_V,
                    "current_A": cycle.current_A,
                }, columns=CYCLE_COLUMNS)
                for cycle in sorted(by_cell[cell_id], key=lambda c: c.cycle_index)
            ]
            path = directory / filename
            pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
            written.append(path)

        truth_frame = pd.DataFrame([asdict(r) for r in truth.records])
        truth_path = directory / TRUTH_FILE
        truth_frame.reindex(columns=TRUTH_COLUMNS).to_csv(
            truth_path, index=False, float_format="%.9g", lineterminator="\n"
        )
        written.append(truth_path)
    except OSError as exc:
        raise IoFailure(f"cannot write fleet to {directory}: {exc}")

    logger.info("Exported %d cells to %s", len(by_cell), directory)
    return written


def load_ground_truth(path: Union[str, Path]) -> Dict[Tuple[str, int], float]:
    """(cell_id, cycle_index) -> true SOH from a ground_truth.csv."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"cell_id": str})
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: unreadable ground truth ({exc})")
    missing = [c for c in TRUTH_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")
    return {
        (str(cell), int(cycle)): float(soh)
        for cell, cycle, soh in zip(frame["cell_id"], frame["cycle_index"], frame["true_soh_pct"])
    }
