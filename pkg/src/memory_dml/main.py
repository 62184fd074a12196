#!/usr/bin/env python3
"""
Memory-based deep metric learning laboratory

Weight curves, training runs, parameter grids, feature-drift comparisons and
gradient-contribution histograms, written as CSV
"""

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from loguru import logger
from tqdm import tqdm

# Allow running as a script: python src/memory_dml/main.py
sys.path.append(str(Path(__file__).resolve().parent.parent))

from memory_dml import config
from memory_dml.core import partition_pairs, similarity_matrix
from memory_dml.encoder import forward
from memory_dml.errors import ConfigError, DatasetError, MemoryDMLError, TrainingDivergedError
from memory_dml.experiment_config import ExperimentConfig
from memory_dml.memory import MemoryBank
from memory_dml.trainer import (RunRecord, TrainConfig, grid_run, is_collapsed, make_probe,
                                sample_batch, train, warm_start)
from memory_dml.weighting import (AnchorContext, default_curve_grid, gradient_contribution_histogram,
                                  sample_weight_curve)

PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent

# Load environment variables
load_dotenv(PROJECT_ROOT / ".env")

# CLI dest -> config key
OVERRIDE_KEYS = {
    "pos": "pos", "neg": "neg", "alpha": "alpha", "beta": "beta", "lam": "lambda", "tau": "tau",
    "a": "a", "b": "b", "easy_beta": "easy_beta", "hard_beta": "hard_beta",
    "mode": "mode", "momentum": "momentum", "memory_size": "memory_size",
    "seed": "seed", "iterations": "iterations", "dataset": "dataset",
}


def output_dir() -> Path:
    return Path(os.getenv(config.ENV_OUTPUT_DIR) or PROJECT_ROOT / "data" / "experiments")


def resolve_out(args, default_name: str) -> Path:
    return Path(args.out) if args.out else output_dir() / default_name


def write_csv(path: Path, config_line: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a CSV whose first line records the resolved configuration"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config: {config_line}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def sibling(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}_{suffix}{path.suffix or '.csv'}")


def load_experiment(args) -> ExperimentConfig:
    experiment = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {key: getattr(args, dest, None) for dest, key in OVERRIDE_KEYS.items()}
    return experiment.with_overrides(overrides)


def print_banner(title: str, lines: Dict[str, str]):
    print("=" * 60)
    print(title)
    for key, value in lines.items():
        print(f"{key}: {value}")
    print("=" * 60)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_curves(args) -> int:
    experiment = load_experiment(args)
    scheme = experiment.scheme()
    grid = default_curve_grid(args.grid_points)
    fixed_ctx = None
    if args.ctx_pos is not None or args.ctx_neg is not None:
        fixed_ctx = AnchorContext.from_values(args.ctx_pos or [], args.ctx_neg or [])
    curve = sample_weight_curve(scheme, grid, fixed_ctx=fixed_ctx, reference=args.reference)

    out = resolve_out(args, "curves.csv")
    config_line = f"{scheme.describe()}; grid_points={args.grid_points}; reference={args.reference:g}"
    if fixed_ctx is not None:
        config_line += f"; ctx_pos={args.ctx_pos or []}; ctx_neg={args.ctx_neg or []}"
    write_csv(out, config_line, ["similarity", "w_pos", "w_neg"],
              ((repr(s), repr(p), repr(n)) for s, p, n in curve.rows()))
    print(f"Weight curves for {scheme.describe()} saved to: {out}")
    return config.EXIT_OK


def _write_run_outputs(out: Path, experiment: ExperimentConfig, train_config: TrainConfig,
                       record: RunRecord, collapsed: bool) -> Dict[str, Path]:
    config_line = experiment.describe()
    paths = {"record": write_csv(out, config_line,
                                 ["iteration", "loss", "hard_negatives", "feature_drift", "recall_at_1"],
                                 record.rows())}
    summary = [
        ("mode", train_config.mode_label()),
        ("scheme", train_config.scheme.describe()),
        ("iterations", len(record)),
        ("mean_loss", repr(float(np.mean(record.losses))) if record.losses else ""),
        ("mean_hard_negatives", repr(record.mean_hard_negatives())),
        ("mean_feature_drift", repr(record.mean_drift())),
    ]
    summary += [(f"recall_at_{k}", repr(r)) for k, r in sorted(record.final_recall.items())]
    summary.append(("collapsed", str(collapsed).lower()))
    paths["summary"] = write_csv(sibling(out, "summary"), config_line, ["key", "value"], summary)
    if record.final_result is not None:
        paths["recall"] = write_csv(sibling(out, "recall"), config_line, ["k", "recall"],
                                    ((k, repr(r)) for k, r in record.final_result.recall_rows()))
        paths["similarity"] = write_csv(
            sibling(out, "similarity"), config_line,
            ["bin_low", "bin_high", "positive_count", "negative_count"],
            ((repr(lo), repr(hi), p, n) for lo, hi, p, n in record.final_result.histogram_rows()),
        )
    return paths


def cmd_train(args) -> int:
    experiment = load_experiment(args)
    train_config = experiment.train_config()

    print_banner("Memory DML training run", {
        "Mode": train_config.mode_label(),
        "Scheme": train_config.scheme.describe(),
        "Iterations": str(train_config.iterations),
        "Batch": f"{train_config.classes_per_batch} x {train_config.samples_per_class}",
        "Seed": str(train_config.seed),
    })

    print("\n[Phase 1] Loading dataset...")
    train_set, test_set = experiment.load_datasets()
    print(f"Train: {len(train_set)} samples / {train_set.num_classes} classes, "
          f"test: {len(test_set)} samples / {test_set.num_classes} classes")

    print("\n[Phase 2] Training...")
    try:
        _, record = train(train_config, train_set, test_set=test_set, progress=not args.no_progress)
        collapsed = train_config.iterations > 0 and is_collapsed(record.final_recall_at_1, test_set.num_classes)
    except TrainingDivergedError as e:
        print(f"Training diverged: {e}")
        record = e.record if e.record is not None else RunRecord()
        collapsed = True

    print("\n[Phase 3] Saving results...")
    paths = _write_run_outputs(resolve_out(args, "train.csv"), experiment, train_config, record, collapsed)

    print("\n" + "=" * 60)
    print(f"Mode: {train_config.mode_label()}")
    for k, r in sorted(record.final_recall.items()):
        print(f"Recall@{k}: {r:.4f}")
    print(f"Collapsed: {'Yes' if collapsed else 'No'}")
    for name, path in paths.items():
        print(f"{name.capitalize()} saved to: {path}")
    print("=" * 60)
    return config.EXIT_COLLAPSE if collapsed else config.EXIT_OK


def parse_axis(text: str) -> Tuple[str, List[float]]:
    """Parse `name=v1,v2,...`; `momentum=table` expands to the default momentum table"""
    if "=" not in text:
        raise ConfigError(f"grid axis must look like name=v1,v2,..., got '{text}'")
    name, values = (part.strip() for part in text.split("=", 1))
    if name not in config.GRID_AXES:
        raise ConfigError(f"unknown grid axis '{name}', expected one of {config.GRID_AXES}")
    if name == "momentum" and values == "table":
        return name, list(config.MOMENTUM_TABLE)
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"grid axis '{name}' has a non-numeric value: '{values}'")
    if not parsed or not all(np.isfinite(parsed)):
        raise ConfigError(f"grid axis '{name}' needs finite values")
    return name, parsed


def cmd_grid(args) -> int:
    experiment = load_experiment(args)
    base = experiment.train_config()
    axes = dict(parse_axis(axis) for axis in args.axes)
    if not axes:
        raise ConfigError("grid needs at least one axis, e.g. alpha=0.1,1,10")

    print_banner("Memory DML parameter grid", {
        "Mode": base.mode_label(),
        "Scheme": base.scheme.describe(),
        "Axes": ", ".join(f"{name}={values}" for name, values in axes.items()),
        "Jobs": str(args.jobs),
    })
    train_set, test_set = experiment.load_datasets()
    rows = grid_run(base, axes, train_set, test_set, jobs=args.jobs, progress=not args.no_progress)

    out = resolve_out(args, "grid.csv")
    config_line = f"{experiment.describe()}; axes={' '.join(args.axes)}"
    write_csv(out, config_line, list(axes) + ["recall_at_1", "collapsed", "status"], (
        [repr(row.point[name]) for name in axes]
        + ["" if row.recall_at_1 is None else repr(row.recall_at_1), str(row.collapsed).lower(), row.status]
        for row in rows
    ))
    counts = {}
    for row in rows:
        counts[row.status] = counts.get(row.status, 0) + 1
    print(f"\n{len(rows)} grid points: " + ", ".join(f"{n} {s}" for s, n in sorted(counts.items())))
    print(f"Grid saved to: {out}")
    return config.EXIT_OK


def interval_means(record: RunRecord, interval: int) -> Dict[int, float]:
    """Mean hard-negative count over the interval starting at each drift iteration"""
    return {t: record.mean_hard_negatives(t, t + interval) for t in record.feature_drift}


def cmd_drift(args) -> int:
    experiment = load_experiment(args)
    base = experiment.train_config()
    train_set, _ = experiment.load_datasets()
    probe = make_probe(base, train_set)
    warmup = experiment["drift_warmup"]

    print_banner("Feature drift: mini-batch vs XBM vs s-MoCo", {
        "Scheme": base.scheme.describe(),
        "Warm-up": f"{warmup} mini-batch iterations",
        "Iterations": str(base.iterations),
        "Drift interval": str(base.drift_interval),
        "Seed": str(base.seed),
    })
    configs = {name: replace(base, mode=mode, momentum=momentum) for name, mode, momentum in config.DRIFT_RUNS}
    start = warm_start(base, train_set, warmup)
    records: Dict[str, RunRecord] = {}
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as executor:
        futures = {executor.submit(train, cfg, train_set, start, None, probe): name for name, cfg in configs.items()}
        for future in tqdm(as_completed(futures), total=len(futures), desc="Drift runs",
                           disable=args.no_progress):
            records[futures[future]] = future.result()[1]

    names = [name for name, _, _ in config.DRIFT_RUNS]
    hard = {name: interval_means(records[name], base.drift_interval) for name in names}
    iterations = sorted(records[names[0]].feature_drift)
    out = resolve_out(args, "drift.csv")
    write_csv(out, experiment.describe(),
              ["iteration"] + [f"drift_{n}" for n in names] + [f"hard_negatives_{n}" for n in names],
              ([t] + [repr(records[n].feature_drift[t]) for n in names] + [repr(hard[n][t]) for n in names]
               for t in iterations))

    print()
    for name in names:
        print(f"{name}: mean drift {records[name].mean_drift():.6g}, "
              f"mean hard negatives {records[name].mean_hard_negatives():.2f}")
    print(f"Drift series saved to: {out}")
    return config.EXIT_OK


def cmd_histogram(args) -> int:
    experiment = load_experiment(args)
    train_config = experiment.train_config()
    train_set, _ = experiment.load_datasets()
    params, _ = train(train_config, train_set, progress=not args.no_progress)

    # One anchor batch against a memory refilled by the final encoder
    rng = np.random.default_rng((train_config.seed, config.SAMPLER_STREAM))
    inputs, labels = sample_batch(train_set, train_config.classes_per_batch, train_config.samples_per_class, rng)
    anchors, _ = forward(params, inputs)
    if train_config.mode == "memory":
        memory = MemoryBank(train_config.memory_capacity, 0.0, params)
        while not memory.is_full:
            memory.enqueue_batch(*sample_batch(train_set, train_config.classes_per_batch,
                                               train_config.samples_per_class, rng))
        sim, partition = memory.mine_pairs(anchors, labels)
    else:
        sim = similarity_matrix(anchors, anchors)
        partition = partition_pairs(labels, labels, exclude_self=True)

    histogram = gradient_contribution_histogram(train_config.scheme, sim, partition, bins=args.bins)
    out = resolve_out(args, "histogram.csv")
    write_csv(out, f"{experiment.describe()}; bins={args.bins}",
              ["bin_low", "bin_high", "positive_mass", "negative_mass"],
              ((repr(lo), repr(hi), repr(p), repr(n)) for lo, hi, p, n in histogram.rows()))
    print(f"Gradient contribution histogram saved to: {out}")
    return config.EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _similarity(text: str) -> float:
    value = float(text)
    if not -1.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"similarity must lie in [-1, 1], got {text}")
    return value


def _similarity_list(text: str) -> List[float]:
    return [_similarity(v) for v in text.split(",") if v.strip()]


def _at_least(minimum: int):
    def parse(text: str) -> int:
        value = int(text)
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be at least {minimum}, got {text}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='Experiment config file (key = value lines)')
    common.add_argument('--out', type=str, default=None, help='Output CSV path')
    common.add_argument('--seed', type=int, default=None, help='Run seed')
    common.add_argument('--jobs', type=_at_least(1), default=int(os.getenv(config.ENV_JOBS, "1")),
                        help='Concurrent runs (default: $MEMORY_DML_JOBS or 1)')
    common.add_argument('--log-level', type=str, default=os.getenv(config.ENV_LOG_LEVEL, "WARNING"),
                        help='loguru level (default: $MEMORY_DML_LOG_LEVEL or WARNING)')
    common.add_argument('--no-progress', action='store_true', help='Hide progress bars')
    scheme = common.add_argument_group('weight scheme')
    scheme.add_argument('--pos', type=str, default=None, help='Positive weighting: contrastive, binomial, ms, infonce, npair, hll')
    scheme.add_argument('--neg', type=str, default=None, help='Negative weighting: contrastive, binomial, ms, infonce, npair, hll, split')
    scheme.add_argument('--alpha', type=float, default=None, help='Positive scale factor')
    scheme.add_argument('--beta', type=float, default=None, help='Negative scale factor')
    scheme.add_argument('--lambda', dest='lam', type=float, default=None, help='Similarity margin lambda')
    scheme.add_argument('--tau', type=float, default=None, help='InfoNCE temperature')
    scheme.add_argument('--a', type=float, default=None, help='HLL ramp start')
    scheme.add_argument('--b', type=float, default=None, help='HLL ramp end')
    scheme.add_argument('--easy-beta', type=float, default=None, help='Split negatives: scale for easy negatives')
    scheme.add_argument('--hard-beta', type=float, default=None, help='Split negatives: scale for hard negatives')
    mode = common.add_argument_group('training mode')
    mode.add_argument('--mode', type=str, default=None, choices=['minibatch', 'memory'], help='Pair source')
    mode.add_argument('--momentum', type=float, default=None, help='Memory encoder momentum (0 = XBM)')
    mode.add_argument('--memory-size', type=int, default=None, help='Memory capacity in embeddings')
    mode.add_argument('--iterations', type=int, default=None, help='Training iterations')
    mode.add_argument('--dataset', type=str, default=None, help="'synthetic' or a CSV path")

    parser = argparse.ArgumentParser(description='Memory-based deep metric learning laboratory')
    sub = parser.add_subparsers(dest='command', required=True)

    curves = sub.add_parser('curves', parents=[common], help='Sample positive/negative weight curves')
    curves.add_argument('--grid-points', type=_at_least(2), default=config.CURVE_GRID_POINTS, help='Grid size over [-1, 1]')
    curves.add_argument('--reference', type=_similarity, default=config.CURVE_REFERENCE_SIMILARITY,
                        help='Similarity of the opposite-polarity reference pair')
    curves.add_argument('--ctx-pos', type=_similarity_list, default=None, help='Fixed context positives, comma-separated')
    curves.add_argument('--ctx-neg', type=_similarity_list, default=None, help='Fixed context negatives, comma-separated')
    curves.set_defaults(handler=cmd_curves)

    sub.add_parser('train', parents=[common], help='Train one encoder').set_defaults(handler=cmd_train)

    grid = sub.add_parser('grid', parents=[common], help='Train over a parameter grid')
    grid.add_argument('axes', nargs='*', help='Axes like alpha=0.1,1,10 (momentum=table for the default table)')
    grid.set_defaults(handler=cmd_grid)

    sub.add_parser('drift', parents=[common],
                   help='Compare feature drift of mini-batch, XBM and s-MoCo').set_defaults(handler=cmd_drift)

    histogram = sub.add_parser('histogram', parents=[common], help='Gradient contribution histogram')
    histogram.add_argument('--bins', type=_at_least(1), default=config.DEFAULT_HISTOGRAM_BINS, help='Uniform bins over [-1, 1]')
    histogram.set_defaults(handler=cmd_histogram)
    return parser


def configure_logging(level: str):
    logger.remove()
    logger.add(sys.stderr, level=level.upper())


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return config.EXIT_OK if e.code == 0 else config.EXIT_USAGE

    try:
        configure_logging(args.log_level)
    except ValueError:
        print(f"Error: unknown log level '{args.log_level}'", file=sys.stderr)
        return config.EXIT_USAGE

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return config.EXIT_USAGE
    except DatasetError as e:
        print(f"Error: {e}", file=sys.stderr)
        return config.EXIT_RUNTIME
    except (MemoryDMLError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return config.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
