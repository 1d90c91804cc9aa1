"""Command-line entry point.

Subcommands map onto the experiment modes: ``datagen`` writes a dataset
directory, ``evolve`` runs the generational search (optionally a policies
x seeds batch), ``baseline`` trains the end-to-end net on the same data,
and ``validate-perf`` times training under caching and worker-count
configurations.  ``--paper-scale`` switches the defaults from the desk
profile to the full-scale setup; explicit flags override either profile.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, paper_profile
from .data import DataGenerationError
from .harness import run_experiment

DATA_DIR_ENV = "NESYEVO_DATA_DIR"

_FLAGS = [
    # (flag, config field, type, help)
    ("--n-atoms", "n_atoms", int, "number of atoms per context"),
    ("--train-size", "train_size", int, "training instances"),
    ("--val-size", "val_size", int, "validation instances"),
    ("--test-size", "test_size", int, "held-out test instances"),
    ("--maxgen", "max_generations", int, "generation budget"),
    ("--threshold", "threshold", float, "fitness grouping threshold t"),
    ("--selection-exponent", "selection_exponent", int, "selection nonlinearity k"),
    ("--rule-additions", "rule_additions", int, "random-context rule draws per generation"),
    ("--early-stop", "early_stop_correct", float, "validation correct fraction that stops the run"),
    ("--epochs", "epochs", int, "training epochs per organism"),
    ("--batch-size", "batch_size", int, "training batch size"),
    ("--loss-ratio", "reconstruction_ratio", float, "reconstruction:semantic loss weight"),
    ("--baseline-epochs", "baseline_epochs", int, "epochs for the end-to-end baseline"),
    ("--glyphs", "glyphs", str, "glyph source: synthetic or mnist"),
    ("--glyph-pool", "glyph_pool", int, "synthetic glyphs per digit class"),
    ("--glyph-noise", "glyph_noise", float, "synthetic glyph noise amplitude"),
    ("--mnist-dir", "mnist_dir", str, "directory holding the MNIST IDX files"),
    ("--seed", "seed", int, "master seed"),
    ("--seeds", "seeds", int, "runs per target policy"),
    ("--policies", "policies", int, "number of random target policies"),
    ("--workers", "workers", int, "worker processes (0 = in-process)"),
    ("--dtype", "dtype", str, "network float width (float32 or float64)"),
    ("--perf-organisms", "perf_organisms", int, "organisms per validate-perf batch"),
]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", dest="out_dir", required=True, help="output directory")
    parser.add_argument(
        "--data",
        dest="data_dir",
        default=argparse.SUPPRESS,
        help=f"prebuilt dataset directory (relative to ${DATA_DIR_ENV} if set)",
    )
    parser.add_argument(
        "--paper-scale",
        action="store_true",
        help="use the full-scale profile (8 atoms, MNIST, maxgen 500)",
    )
    parser.add_argument(
        "--no-cache",
        dest="cache",
        action="store_false",
        default=argparse.SUPPRESS,
        help="disable compiled-graph caching during training",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    for flag, field, ftype, help_text in _FLAGS:
        parser.add_argument(flag, dest=field, type=ftype, default=argparse.SUPPRESS, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nesyevo",
        description="Evolve rule policies jointly with a glyph perception network.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, description in (
        ("evolve", "run the evolutionary search"),
        ("baseline", "train the end-to-end baseline"),
        ("datagen", "generate and save an exemplar dataset"),
        ("validate-perf", "measure caching and worker-pool behaviour"),
    ):
        _add_common(sub.add_parser(mode, help=description))
    return parser


def _resolve_data_dir(value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(value)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    return str(path)


def config_from_args(namespace: argparse.Namespace) -> tuple[ExperimentConfig, bool]:
    options = vars(namespace).copy()
    mode = options.pop("mode")
    verbose = options.pop("verbose", False)
    use_paper = options.pop("paper_scale", False)
    options["data_dir"] = _resolve_data_dir(options.get("data_dir"))
    if options["data_dir"] is None:
        options.pop("data_dir")
    config = ExperimentConfig(mode=mode)
    if use_paper:
        config = config.with_overrides(**paper_profile())
    config = config.with_overrides(**options)
    config.validate()
    return config, verbose


def main(argv=None) -> int:
    namespace = build_parser().parse_args(argv)
    try:
        config, verbose = config_from_args(namespace)
    except ConfigError as err:
        print(f"nesyevo: configuration error: {err}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        run_experiment(config)
    except (ConfigError, DataGenerationError) as err:
        print(f"nesyevo: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"nesyevo: i/o error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
