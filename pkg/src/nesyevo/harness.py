"""Experiment orchestration: run modes, artifact writers, perf validation.

Every run writes deterministic artifacts (JSON lines, CSV, snapshots)
plus a separate ``timing.json``; rerunning with the same seeds reproduces
everything byte for byte except the timing files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baseline import BaselineNet, train_baseline
from .config import ConfigError, ExperimentConfig
from .data import (
    ExemplarSet,
    GlyphPool,
    TargetPolicySpec,
    build_exemplar_set,
    generate_target_policy,
    load_dataset,
    load_idx,
    save_dataset,
    synth_glyphs,
)
from .evolution import Lineage, evolve, spawn_population
from .organism import EncoderPerception, Organism
from .parallel import limit_blas_threads, run_tasks, train_population
from .policy import Policy, render_policy
from .wmc import CacheStats

__all__ = [
    "run_experiment",
    "run_evolve",
    "run_baseline",
    "run_datagen",
    "run_validate_perf",
    "GENERATION_CSV_COLUMNS",
    "BASELINE_CSV_COLUMNS",
    "AGGREGATE_CSV_COLUMNS",
]

log = logging.getLogger("nesyevo")

GENERATION_CSV_COLUMNS = [
    "generation",
    "mutation",
    "group",
    "raw_score",
    "normalized_score",
    "val_correct",
    "val_abstain",
    "val_wrong",
    "test_correct",
    "test_abstain",
    "test_wrong",
    "semantic_loss",
    "reconstruction_loss",
    "homogeneous_rule",
    "population_size",
]

BASELINE_CSV_COLUMNS = [
    "epoch",
    "train_accuracy",
    "val_accuracy",
    "test_accuracy",
    "train_loss",
    "val_loss",
]

AGGREGATE_CSV_COLUMNS = ["scale_point", "metric", "median", "q1", "q3"]

GROUP_LETTERS = {"beneficial": "b", "neutral": "n", "detrimental": "d"}


def run_experiment(config: ExperimentConfig):
    """Dispatch on config.mode; returns the out directory path."""
    config.validate()
    limit_blas_threads(1)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    if config.mode == "datagen":
        result = run_datagen(config)
    elif config.mode == "evolve":
        result = run_evolve(config)
    elif config.mode == "baseline":
        result = run_baseline(config)
    else:
        result = run_validate_perf(config)
    log.info("mode %s finished in %.1fs -> %s", config.mode, time.perf_counter() - started, out)
    return result


# ---------------------------------------------------------------------------
# dataset plumbing


def _mnist_pools(mnist_dir) -> tuple[GlyphPool, GlyphPool]:
    base = Path(mnist_dir)

    def find(stem):
        for suffix in ("", ".gz"):
            candidate = base / (stem + suffix)
            if candidate.exists():
                return candidate
        raise ConfigError(f"missing MNIST file {stem}[.gz] under {base}")

    train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


def _make_dataset(config: ExperimentConfig, policy_index: int, seed_index: int):
    """Fresh target policy + splits for one (policy, seed) run cell."""
    target_rng = np.random.default_rng([config.seed, 101, policy_index])
    target = generate_target_policy(
        TargetPolicySpec(n_atoms=config.n_atoms), target_rng
    )
    if config.glyphs == "mnist":
        train_pool, test_pool = _mnist_pools(config.mnist_dir)
    else:
        train_pool = synth_glyphs(
            config.glyph_pool,
            config.glyph_noise,
            np.random.default_rng([config.seed, 201, policy_index, seed_index]),
        )
        test_pool = synth_glyphs(
            config.glyph_pool,
            config.glyph_noise,
            np.random.default_rng([config.seed, 202, policy_index, seed_index]),
        )
    sample_rng = np.random.default_rng([config.seed, 301, policy_index, seed_index])
    splits = build_exemplar_set(
        target,
        (config.train_size, config.val_size, config.test_size),
        train_pool,
        test_pool,
        sample_rng,
    )
    meta = {
        "seed": config.seed,
        "policy_index": policy_index,
        "seed_index": seed_index,
        "glyphs": config.glyphs,
        "target_policy": render_policy(target),
    }
    return target, splits, meta


def _dataset_for_run(config: ExperimentConfig, policy_index: int, seed_index: int):
    if config.data_dir:
        splits, manifest = load_dataset(config.data_dir)
        target = None
        if manifest.get("target_policy") is not None:
            from .policy import parse_policy

            target = parse_policy(manifest["target_policy"], manifest["n_atoms"])
        return target, splits, manifest
    return _make_dataset(config, policy_index, seed_index)


def _master_seed(config: ExperimentConfig, policy_index: int, seed_index: int) -> int:
    entropy = np.random.SeedSequence([config.seed, policy_index, seed_index])
    return int(entropy.generate_state(1, dtype=np.uint64)[0])


def run_datagen(config: ExperimentConfig):
    _, splits, meta = _make_dataset(config, 0, 0)
    out = Path(config.out_dir)
    save_dataset(out, splits, meta)
    log.info("dataset written to %s", out)
    return out


# ---------------------------------------------------------------------------
# serialization helpers


def _finite(value):
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


def _triple_dict(triple):
    return {
        "correct": round(triple.correct, 10),
        "abstain": round(triple.abstain, 10),
        "wrong": round(triple.wrong, 10),
    }


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(round(value, 10))
    return str(value)


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c)) for c in columns])


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _lineage_records(lineage: Lineage):
    for entry in lineage.entries:
        report = entry.train_report
        yield {
            "generation": entry.generation,
            "mutation": entry.mutation.label if entry.mutation else None,
            "group": GROUP_LETTERS[entry.fitness.group] if entry.fitness else None,
            "raw_score": entry.fitness.raw_score if entry.fitness else None,
            "normalized_score": round(entry.fitness.normalized, 10) if entry.fitness else None,
            "val": _triple_dict(entry.val),
            "test": _triple_dict(entry.test) if entry.test else None,
            "semantic_loss": _finite(report.semantic_loss) if report else None,
            "reconstruction_loss": _finite(report.reconstruction_loss) if report else None,
            "homogeneous_rule": entry.homogeneous_rule,
            "population_size": entry.population_size,
            "policy": render_policy(entry.organism.policy),
        }


def _generation_rows(lineage: Lineage):
    for record in _lineage_records(lineage):
        row = dict(record)
        val = row.pop("val")
        test = row.pop("test") or {}
        row.pop("policy")
        row.update({f"val_{k}": v for k, v in val.items()})
        row.update({f"test_{k}": v for k, v in test.items()})
        yield row


# ---------------------------------------------------------------------------
# evolve mode


def _evolve_single(config: ExperimentConfig, policy_index: int, seed_index: int,
                   run_dir: Path, inner_workers: int):
    limit_blas_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target, splits, meta = _dataset_for_run(config, policy_index, seed_index)
    master = _master_seed(config, policy_index, seed_index)
    settings = config.evolve_settings(master, workers=inner_workers)
    started = time.perf_counter()
    lineage = evolve(settings, splits)
    wall = time.perf_counter() - started
    stuck_flags = [
        entry.organism.detect_stuck(splits["val"]).stuck for entry in lineage.entries
    ]
    with open(run_dir / "lineage.jsonl", "w", encoding="utf-8") as fh:
        for record in _lineage_records(lineage):
            fh.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")
    _write_csv(run_dir / "generations.csv", GENERATION_CSV_COLUMNS, _generation_rows(lineage))
    final = lineage.final
    summary = {
        "policy_index": policy_index,
        "seed_index": seed_index,
        "master_seed": master,
        "generations": len(lineage) - 1,
        "stopped_early": lineage.stopped_early,
        "final_val": _triple_dict(final.val),
        "final_test": _triple_dict(final.test),
        "learned_policy": render_policy(final.organism.policy),
        "learned_rules": len(final.organism.policy.rules),
        "target_policy": meta.get("target_policy"),
        "stuck_any": bool(any(stuck_flags)),
        "stuck_generations": int(sum(stuck_flags)),
        "final_fitness_raw": final.fitness.raw_score if final.fitness else None,
    }
    _write_json(run_dir / "summary.json", summary)
    _write_json(run_dir / "timing.json", {"wall_seconds": wall})
    final.organism.save_snapshot(run_dir / "final_organism")
    series = {
        "test_correct": [e.test.correct for e in lineage.entries],
        "test_abstain": [e.test.abstain for e in lineage.entries],
        "test_wrong": [e.test.wrong for e in lineage.entries],
    }
    return summary, series, wall


def _interpolate_series(series: list[float], points: int = 100) -> np.ndarray:
    """Resample one run's per-generation series onto a unified 1..100 axis."""
    values = np.asarray(series, dtype=np.float64)
    if len(values) == 1:
        return np.repeat(values, points)
    source = np.linspace(0.0, 1.0, len(values))
    return np.interp(np.linspace(0.0, 1.0, points), source, values)


def _aggregate_rows(all_series: list[dict]):
    metrics = ("test_correct", "test_abstain", "test_wrong")
    stacked = {
        metric: np.stack([_interpolate_series(s[metric]) for s in all_series])
        for metric in metrics
    }
    for point in range(100):
        for metric in metrics:
            column = stacked[metric][:, point]
            yield {
                "scale_point": point + 1,
                "metric": metric,
                "median": float(np.median(column)),
                "q1": float(np.quantile(column, 0.25)),
                "q3": float(np.quantile(column, 0.75)),
            }


def run_evolve(config: ExperimentConfig):
    out = Path(config.out_dir)
    cells = [(i, j) for i in range(config.policies) for j in range(config.seeds)]
    multi = len(cells) > 1
    inner_workers = 0 if multi else config.workers
    args = [
        (config, i, j, out / f"run_p{i:02d}_s{j:02d}", inner_workers)
        for i, j in cells
    ]
    results = run_tasks(_evolve_single, args, workers=config.workers if multi else 0)
    summaries = [r[0] for r in results]
    all_series = [r[1] for r in results]
    walls = [r[2] for r in results]
    final_correct = [s["final_test"]["correct"] for s in summaries]
    final_wrong = [s["final_test"]["wrong"] for s in summaries]
    final_abstain = [s["final_test"]["abstain"] for s in summaries]
    batch = {
        "runs": summaries,
        "n_runs": len(summaries),
        "median_test_correct": float(np.median(final_correct)),
        "median_test_wrong": float(np.median(final_wrong)),
        "median_test_abstain": float(np.median(final_abstain)),
        "mean_test_correct": float(np.mean(final_correct)),
        "sd_test_correct": float(np.std(final_correct)),
        "stuck_run_fraction": float(np.mean([s["stuck_any"] for s in summaries])),
    }
    _write_json(out / "batch_summary.json", batch)
    _write_csv(out / "aggregate.csv", AGGREGATE_CSV_COLUMNS, _aggregate_rows(all_series))
    _write_json(
        out / "timing.json",
        {"total_wall_seconds": float(sum(walls)), "per_run_wall_seconds": walls},
    )
    return batch


# ---------------------------------------------------------------------------
# baseline mode


def _baseline_single(config: ExperimentConfig, policy_index: int, seed_index: int,
                     run_dir: Path):
    limit_blas_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _, splits, meta = _dataset_for_run(config, policy_index, seed_index)
    master = _master_seed(config, policy_index, seed_index)
    net = BaselineNet(config.arch(), config.n_atoms, seed=master, dtype=np.dtype(config.dtype))
    started = time.perf_counter()
    curves = train_baseline(
        net,
        splits,
        epochs=config.baseline_epochs,
        batch_size=config.batch_size,
        rng=np.random.default_rng([master, 1]),
    )
    wall = time.perf_counter() - started
    rows = [
        {
            "epoch": e + 1,
            "train_accuracy": curves.train_accuracy[e],
            "val_accuracy": curves.val_accuracy[e],
            "test_accuracy": curves.test_accuracy[e],
            "train_loss": curves.train_loss[e],
            "val_loss": curves.val_loss[e],
        }
        for e in range(curves.epochs_run)
    ]
    _write_csv(run_dir / "curves.csv", BASELINE_CSV_COLUMNS, rows)
    summary = {
        "policy_index": policy_index,
        "seed_index": seed_index,
        "master_seed": master,
        "epochs_run": curves.epochs_run,
        "diverged": curves.diverged,
        "final_test_accuracy": _finite(curves.final_test_accuracy()),
        "best_test_accuracy": _finite(max(curves.test_accuracy, default=float("nan"))),
        "target_policy": meta.get("target_policy"),
    }
    _write_json(run_dir / "summary.json", summary)
    _write_json(run_dir / "timing.json", {"wall_seconds": wall})
    return summary, wall


def run_baseline(config: ExperimentConfig):
    out = Path(config.out_dir)
    cells = [(i, j) for i in range(config.policies) for j in range(config.seeds)]
    args = [(config, i, j, out / f"run_p{i:02d}_s{j:02d}") for i, j in cells]
    results = run_tasks(_baseline_single, args, workers=config.workers if len(cells) > 1 else 0)
    summaries = [r[0] for r in results]
    walls = [r[1] for r in results]
    best = [s["best_test_accuracy"] for s in summaries if s["best_test_accuracy"] is not None]
    batch = {
        "runs": summaries,
        "n_runs": len(summaries),
        "median_best_test_accuracy": float(np.median(best)) if best else None,
        "diverged_runs": int(sum(s["diverged"] for s in summaries)),
    }
    _write_json(out / "batch_summary.json", batch)
    _write_json(
        out / "timing.json",
        {"total_wall_seconds": float(sum(walls)), "per_run_wall_seconds": walls},
    )
    return batch


# ---------------------------------------------------------------------------
# performance validation mode


def _perf_population(config: ExperimentConfig, splits) -> list[Organism]:
    """A reproducible batch of organisms with nontrivial policies."""
    founder = Organism(
        Policy(config.n_atoms),
        EncoderPerception(config.arch(), seed=0, dtype=np.dtype(config.dtype)),
    )
    rng = np.random.default_rng([config.seed, 9000])
    organisms: list[Organism] = []
    parent = founder
    while len(organisms) < config.perf_organisms:
        batch = spawn_population(parent, config.rule_additions, rng)
        organisms.extend(o for o in batch if o.policy.rules)
        parent = next(o for o in batch if o.mutation.symbolic == "add-rule")
    return organisms[: config.perf_organisms]


def _train_batch_once(config, splits, organisms, cache_enabled, workers):
    settings = config.evolve_settings(0, workers=workers)
    settings = replace(settings, train=replace(settings.train, cache_enabled=cache_enabled))
    tasks = [
        (clone_organism(o), [config.seed, 9100, index])
        for index, o in enumerate(organisms)
    ]
    started = time.perf_counter()
    results = train_population(tasks, splits, settings)
    wall = time.perf_counter() - started
    stats = CacheStats()
    digest_parts = []
    for organism, report, _ in results:
        stats.compilations += report.stats.compilations
        stats.instances_evaluated += report.stats.instances_evaluated
        for name in sorted(organism.perception.net.params):
            digest_parts.append(organism.perception.net.params[name].tobytes())
    digest = hashlib.blake2b(b"".join(digest_parts), digest_size=16).hexdigest()
    return wall, stats, digest


def clone_organism(organism: Organism) -> Organism:
    fresh = Organism(
        organism.policy,
        organism.perception.clone(),
        organism_id=organism.organism_id,
        parent_id=organism.parent_id,
        mutation=organism.mutation,
    )
    return fresh


def run_validate_perf(config: ExperimentConfig):
    """Time organism training under cache on/off and worker counts.

    Checks: caching never slows the batch down, all configurations give
    bit-identical weights, and wall time does not grow as workers are
    added (up to the configured pool size, with jitter tolerance).
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, splits, _ = _dataset_for_run(config, 0, 0)
    organisms = _perf_population(config, splits)
    worker_counts = [0] + list(range(1, max(1, config.workers) + 1))
    rows = []
    digests = set()
    for cache_enabled in (True, False):
        for workers in worker_counts:
            wall, stats, digest = _train_batch_once(
                config, splits, organisms, cache_enabled, workers
            )
            digests.add(digest)
            rows.append(
                {
                    "cache": cache_enabled,
                    "workers": workers,
                    "wall_seconds": wall,
                    "compilations": stats.compilations,
                    "instances_evaluated": stats.instances_evaluated,
                }
            )
            log.info(
                "perf cache=%s workers=%d wall=%.2fs compilations=%d",
                cache_enabled,
                workers,
                wall,
                stats.compilations,
            )
    cached = {r["workers"]: r for r in rows if r["cache"]}
    uncached = {r["workers"]: r for r in rows if not r["cache"]}
    speedups = {
        w: uncached[w]["wall_seconds"] / cached[w]["wall_seconds"] for w in cached
    }
    pool_times = [cached[w]["wall_seconds"] for w in sorted(cached) if w >= 1]
    scaling_ok = all(
        later <= earlier * 1.15 for earlier, later in zip(pool_times, pool_times[1:])
    )
    no_pool, one_worker = cached[0]["wall_seconds"], cached.get(1, cached[0])["wall_seconds"]
    violations = []
    if len(digests) != 1:
        violations.append("numeric results differ across configurations")
    if any(s < 1.0 for s in speedups.values()):
        violations.append("caching slowed some configuration down")
    if not scaling_ok:
        violations.append("wall time grew with added workers (beyond 15% jitter)")
    for violation in violations:
        log.warning("validate-perf: %s", violation)
    report = {
        "configurations": rows,
        "bitwise_identical": len(digests) == 1,
        "cache_speedup_sequential": speedups[0],
        "cache_always_faster": all(s >= 1.0 for s in speedups.values()),
        "worker_scaling_monotone": scaling_ok,
        "pool_overhead_ratio": one_worker / no_pool if no_pool > 0 else None,
        "organisms": len(organisms),
        "violations": violations,
    }
    _write_json(out / "perf_report.json", report)
    if violations and len(digests) != 1:
        # Timing wobbles are reported; a numeric mismatch is a hard error.
        raise RuntimeError("validate-perf: " + "; ".join(violations))
    return report
