#!/usr/bin/env python3
"""
Command-line front end for the SOH toolkit.

    python soh_cli.py simulate --cells 8 --cycles 300 --seed 7 --out data/
    python soh_cli.py train --data data/ --holdout cell8 --out model.sindy-soh.json
    python soh_cli.py estimate --model model.sindy-soh.json --data data/cell8.csv

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
from dotenv import load_dotenv

from battery_simulator import SimConfig, export_fleet, load_ground_truth, simulate_fleet
from cv_features import build_feature_rows, correlation_gate, write_correlation_report, write_feature_matrix
from cycle_ingest import ProtocolConfig, discover_cycle_files, label_capacities, load_cycles, write_capacity_labels
from report_generator import ReportGenerator
from soh_errors import DataError, InvalidConfig, IoFailure, SohError, UsageError
from soh_estimator import (
    PipelineConfig,
    build_labeled_dataset,
    estimate,
    load,
    save,
    train_on_cycles,
    write_estimates,
)
from soh_evaluation import METHODS, bench, compare_methods, synthetic_dataset

load_dotenv()

logger = logging.getLogger(__name__)

CONFIG_SECTIONS = ("protocol", "simulation", "pipeline")


class SohArgumentParser(argparse.ArgumentParser):
    """Usage errors: synopsis plus a one-line diagnosis on stderr, exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = SohArgumentParser(prog="soh_cli.py", description="SINDy-based battery SOH estimation toolkit")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="log verbosity (default: $SOH_LOG_LEVEL or WARNING)")
    parser.add_argument("--config", help="JSON file with optional protocol/simulation/pipeline sections")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    sim = commands.add_parser("simulate", help="generate a synthetic aging fleet")
    sim.add_argument("--cells", type=int)
    sim.add_argument("--cycles", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--fade-rate", type=float)
    sim.add_argument("--noise-sd", type=float)
    sim.add_argument("--out", required=True, help="output directory")

    ingest = commands.add_parser("ingest", help="coulomb count and label every charge")
    ingest.add_argument("--data", required=True, help="cycle CSV or directory of them")
    ingest.add_argument("--out", default="capacity_labels.csv")

    features = commands.add_parser("features", help="write the CV feature matrix")
    features.add_argument("--data", required=True)
    features.add_argument("--out", default="features.csv")

    correlate = commands.add_parser("correlate", help="run the correlation gate")
    correlate.add_argument("--data", required=True)
    correlate.add_argument("--holdout", action="append", default=[], help="cell id to exclude (repeatable)")
    correlate.add_argument("--gate", type=float)
    correlate.add_argument("--out", default="correlation.json")

    train = commands.add_parser("train", help="train a sparse SOH model")
    train.add_argument("--data", required=True)
    train.add_argument("--holdout", action="append", default=[])
    train.add_argument("--degree", type=int)
    train.add_argument("--threshold", type=float)
    train.add_argument("--gate", type=float)
    train.add_argument("--out", required=True, help="estimator file (.sindy-soh.json)")

    est = commands.add_parser("estimate", help="estimate SOH per charge")
    est.add_argument("--model", required=True)
    est.add_argument("--data", required=True)
    est.add_argument("--out", default="estimates.csv")

    evaluate = commands.add_parser("evaluate", help="compare SINDy with baselines on held-out cells")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--holdout", action="append", default=[])
    evaluate.add_argument("--truth", help="ground_truth.csv to score against")
    evaluate.add_argument("--methods", default="sindy,ridge,kernel")
    evaluate.add_argument("--reports-dir", default="reports")

    timing = commands.add_parser("bench", help="time training and per-sample prediction")
    timing.add_argument("--data", help="cycle data; synthetic rows when omitted")
    timing.add_argument("--holdout", action="append", default=[])
    timing.add_argument("--train-rows", type=int, default=500)
    timing.add_argument("--test-rows", type=int, default=100)
    timing.add_argument("--repetitions", type=int, default=5)
    timing.add_argument("--seed", type=int, default=7)
    timing.add_argument("--methods", default="sindy,ridge,kernel")
    timing.add_argument("--reports-dir", default="reports")
    return parser


def _read_config(path):
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise IoFailure(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise InvalidConfig(f"config {path} must hold a JSON object")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise InvalidConfig(f"config {path}: unknown sections {', '.join(unknown)}")
    return data


def _overrides(**values):
    return {key: value for key, value in values.items() if value is not None}


def _protocol(file_config):
    return ProtocolConfig.from_dict(file_config.get("protocol"))


def _pipeline(args, file_config):
    pipeline = PipelineConfig.from_dict(file_config.get("pipeline"))
    if "protocol" in file_config:
        pipeline = dataclasses.replace(pipeline, protocol=_protocol(file_config))
    return dataclasses.replace(pipeline, **_overrides(
        holdout=tuple(getattr(args, "holdout", [])) or None,
        library_degree=getattr(args, "degree", None),
        stls_threshold=getattr(args, "threshold", None),
        correlation_gate=getattr(args, "gate", None),
    ))


def _load(data, protocol):
    return load_cycles(discover_cycle_files(data), protocol)


def _methods(listing):
    names = [name.strip().lower() for name in listing.split(",") if name.strip()]
    unknown = [name for name in names if name not in METHODS]
    if unknown or not names:
        raise UsageError(f"unknown methods {', '.join(unknown) or '(none)'}; choose from {', '.join(METHODS)}")
    return [METHODS[name]() for name in names]


def _split(cycles, pipeline, command):
    if not pipeline.holdout:
        raise UsageError(f"{command} needs at least one --holdout cell")
    held = set(pipeline.holdout)
    test_cycles = [c for c in cycles if c.cell_id in held]
    if not test_cycles:
        raise DataError(f"holdout cells {', '.join(sorted(held))} have no cycles in the data")
    train_set = build_labeled_dataset([c for c in cycles if c.cell_id not in held], pipeline)
    test_set = build_labeled_dataset(test_cycles, pipeline)
    return train_set, test_set


def _report_name(command, holdout):
    # cell ids come from the data; ReportGenerator sanitizes the result
    return "_".join([command, *sorted(holdout)])


def cmd_simulate(args, file_config):
    config = SimConfig.from_dict(file_config.get("simulation"))
    if "protocol" in file_config:
        config = dataclasses.replace(config, protocol=_protocol(file_config))
    config = dataclasses.replace(config, **_overrides(
        num_cells=args.cells, cycles_per_cell=args.cycles, seed=args.seed,
        fade_rate=args.fade_rate, fade_noise_sd=args.noise_sd,
    ))
    cycles, truth = simulate_fleet(config)
    written = export_fleet(cycles, truth, args.out)

    print("FLEET SIMULATION")
    print("=" * 50)
    print(f"Cells: {config.num_cells}  Cycles/cell: {config.cycles_per_cell}  Seed: {config.seed}")
    for path in written:
        print(f"  wrote {path}")


def cmd_ingest(args, file_config):
    pipeline = _pipeline(args, file_config)
    cycles = _load(args.data, pipeline.protocol)
    labels = label_capacities(cycles, pipeline.protocol, pipeline.smoothing_sigma, pipeline.smoothing_radius)
    path = write_capacity_labels(labels, args.out)

    print("CAPACITY LABELS")
    print("=" * 50)
    print(f"Cycles: {len(labels)}  Cells: {len({label.cell_id for label in labels})}")
    print(f"Wrote {path}")


def cmd_features(args, file_config):
    pipeline = _pipeline(args, file_config)
    cycles = _load(args.data, pipeline.protocol)
    labels = label_capacities(cycles, pipeline.protocol, pipeline.smoothing_sigma, pipeline.smoothing_radius)
    rows = build_feature_rows(cycles, pipeline.protocol)
    path = write_feature_matrix(rows, args.out, {(l.cell_id, l.cycle_index): l.soh_pct for l in labels})

    print("CV FEATURES")
    print("=" * 50)
    print(f"Rows: {len(rows)}")
    print(f"Wrote {path}")


def cmd_correlate(args, file_config):
    pipeline = _pipeline(args, file_config)
    held = set(pipeline.holdout)
    cycles = [c for c in _load(args.data, pipeline.protocol) if c.cell_id not in held]
    report = correlation_gate(build_labeled_dataset(cycles, pipeline), pipeline.correlation_gate)
    path = write_correlation_report(report, args.out)

    print("CORRELATION WITH SOH")
    print("=" * 50)
    for name, rho in report.rho.items():
        mark = "selected" if name in report.selected else ("constant" if name in report.constant else "")
        print(f"{name:<8} {rho:+.4f}  {mark}")
    print(f"Gate |rho| >= {report.gate}: {', '.join(report.selected) or 'none'}")
    print(f"Wrote {path}")


def cmd_train(args, file_config):
    pipeline = _pipeline(args, file_config)
    cycles = _load(args.data, pipeline.protocol)
    estimator = train_on_cycles(cycles, pipeline)
    path = save(estimator, args.out)

    model, fit = estimator.model, estimator.train_metrics
    print("SPARSE SOH MODEL")
    print("=" * 50)
    print(f"Selected features: {', '.join(estimator.report.selected)}")
    print(f"Active terms: {model.nnz}/{model.library_size} ({model.reduction_ratio:.1%} removed)")
    print(f"Training MAE {fit.mae:.4f}  RMSE {fit.rmse:.4f}  MAX {fit.max_err:.4f}")
    print(model.equation())
    print(f"Wrote {path}")


def cmd_estimate(args, file_config):
    estimator = load(args.model)
    result = estimate(estimator, args.data)
    path = write_estimates(result, args.out)

    print("SOH ESTIMATES")
    print("=" * 50)
    print(f"Estimated: {len(result.estimates)}  Failed: {len(result.failures)}")
    for failure in result.failures:
        print(f"  {failure.cell_id} cycle {failure.cycle_index}: {failure.reason}", file=sys.stderr)
    print(f"Wrote {path}")


def cmd_evaluate(args, file_config):
    pipeline = _pipeline(args, file_config)
    methods = _methods(args.methods)
    cycles = _load(args.data, pipeline.protocol)
    train_set, test_set = _split(cycles, pipeline, "evaluate")

    if args.truth:
        truth = load_ground_truth(args.truth)
        missing = [key for key in test_set.provenance if key not in truth]
        if missing:
            raise DataError(f"{args.truth} has no entry for {missing[0][0]} cycle {missing[0][1]}")
        test_set = dataclasses.replace(test_set, labels=np.array([truth[key] for key in test_set.provenance]))

    selected = correlation_gate(train_set, pipeline.correlation_gate).selected
    if not selected:
        raise DataError("correlation gate selected no features")
    results = compare_methods(methods, train_set.select(selected), test_set.select(selected))

    generator = ReportGenerator(args.reports_dir)
    print(generator.generate_accuracy_table(results))
    path = generator.save_json_report(
        {"holdout": list(pipeline.holdout), "selected": list(selected),
         "results": {name: report.to_dict() for name, report in results.items()}},
        _report_name("evaluate", pipeline.holdout),
    )
    print(f"Wrote {path}")


def cmd_bench(args, file_config):
    methods = _methods(args.methods)
    name = "bench"
    if args.data:
        pipeline = _pipeline(args, file_config)
        train_set, test_set = _split(_load(args.data, pipeline.protocol), pipeline, "bench")
        selected = correlation_gate(train_set, pipeline.correlation_gate).selected
        train_set, test_set = train_set.select(selected), test_set.select(selected)
        name = _report_name("bench", pipeline.holdout)
    else:
        if args.train_rows < 2 or args.test_rows < 1:
            raise UsageError("--train-rows must be >= 2 and --test-rows >= 1")
        rows = synthetic_dataset(args.train_rows + args.test_rows, seed=args.seed)
        in_train = np.arange(len(rows)) < args.train_rows
        train_set, test_set = rows.subset(in_train), rows.subset(~in_train)

    reports = [bench(method, train_set, test_set, args.repetitions) for method in methods]
    generator = ReportGenerator(args.reports_dir)
    print(generator.generate_timing_table(reports))
    path = generator.save_json_report({"timing": [r.to_dict() for r in reports]}, name)
    print(f"Wrote {path}")


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "correlate": cmd_correlate,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    level = args.log_level or os.getenv("SOH_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        file_config = _read_config(args.config)
        COMMANDS[args.command](args, file_config)
    except SohError as e:
        if isinstance(e, UsageError):
            parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
