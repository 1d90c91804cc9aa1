import csv
import json
from pathlib import Path

import numpy as np
import pytest

from nesyevo.cli import build_parser, config_from_args, main
from nesyevo.config import ConfigError, ExperimentConfig, paper_profile
from nesyevo.harness import (
    AGGREGATE_CSV_COLUMNS,
    BASELINE_CSV_COLUMNS,
    GENERATION_CSV_COLUMNS,
    run_experiment,
)

TINY = dict(
    n_atoms=3,
    train_size=80,
    val_size=30,
    test_size=30,
    max_generations=2,
    epochs=1,
    batch_size=40,
    glyph_pool=8,
    conv_channels=(2, 3),
    fc_dims=(12, 8),
)


def tiny_config(mode, out, **extra):
    return ExperimentConfig(mode=mode, out_dir=str(out), **{**TINY, **extra})


def read_tree(root: Path, skip=("timing.json",)):
    files = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name not in skip:
            files[str(path.relative_to(root))] = path.read_bytes()
    return files


class TestConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_paper_profile_fields(self):
        config = ExperimentConfig(mnist_dir="/tmp").with_overrides(**paper_profile())
        assert config.n_atoms == 8
        assert config.train_size == 20000
        assert config.max_generations == 500
        assert config.batch_size == 2000
        assert config.conv_channels == (8, 16)
        assert config.baseline_epochs == 100
        config.validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"mode": "nonsense"},
            {"n_atoms": 0},
            {"glyph_noise": 0.7},
            {"glyphs": "emoji"},
            {"workers": -1},
            {"glyphs": "mnist"},
        ],
    )
    def test_rejections(self, overrides):
        with pytest.raises(ConfigError):
            ExperimentConfig(**overrides).validate()

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig().with_overrides(banana=1)


class TestCli:
    def test_parser_builds_config(self):
        namespace = build_parser().parse_args(
            ["evolve", "--out", "x", "--maxgen", "7", "--seed", "3", "--no-cache"]
        )
        config, verbose = config_from_args(namespace)
        assert config.mode == "evolve"
        assert config.max_generations == 7
        assert config.seed == 3
        assert config.cache is False
        assert not verbose

    def test_paper_scale_flag_then_overrides(self, tmp_path):
        namespace = build_parser().parse_args(
            ["evolve", "--out", "x", "--paper-scale", "--maxgen", "9",
             "--mnist-dir", str(tmp_path)]
        )
        config, _ = config_from_args(namespace)
        assert config.n_atoms == 8         # from the profile
        assert config.max_generations == 9  # explicit flag wins

    def test_env_var_resolves_data_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NESYEVO_DATA_DIR", str(tmp_path))
        namespace = build_parser().parse_args(["evolve", "--out", "x", "--data", "ds"])
        config, _ = config_from_args(namespace)
        assert config.data_dir == str(tmp_path / "ds")

    def test_bad_config_exit_code(self, capsys):
        assert main(["evolve", "--out", "x", "--n-atoms", "0"]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_datagen_roundtrip_via_main(self, tmp_path):
        out = tmp_path / "ds"
        argv = ["datagen", "--out", str(out), "--seed", "5", "--n-atoms", "3",
                "--train-size", "40", "--val-size", "10", "--test-size", "10",
                "--glyph-pool", "8"]
        assert main(argv) == 0
        assert (out / "manifest.json").exists()
        assert (out / "data.bin").exists()


class TestEvolveArtifacts:
    def test_artifact_files_and_schema(self, tmp_path):
        config = tiny_config("evolve", tmp_path / "out", seed=3)
        run_experiment(config)
        run_dir = tmp_path / "out" / "run_p00_s00"
        with open(run_dir / "generations.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == GENERATION_CSV_COLUMNS
        assert len(rows) >= 2
        with open(tmp_path / "out" / "aggregate.csv") as fh:
            agg = list(csv.reader(fh))
        assert agg[0] == AGGREGATE_CSV_COLUMNS
        assert len(agg) == 1 + 100 * 3
        records = [
            json.loads(line)
            for line in (run_dir / "lineage.jsonl").read_text().splitlines()
        ]
        assert records[0]["generation"] == 0
        assert records[0]["group"] is None
        for record in records[1:]:
            assert record["group"] in ("b", "n", "d")
            assert set(record["val"]) == {"correct", "abstain", "wrong"}
        summary = json.loads((run_dir / "summary.json").read_text())
        assert {"generations", "final_test", "learned_policy"} <= set(summary)
        assert (run_dir / "final_organism" / "policy.txt").exists()
        assert (run_dir / "timing.json").exists()

    def test_rerun_byte_identical_except_timing(self, tmp_path):
        config_a = tiny_config("evolve", tmp_path / "a", seed=11, seeds=2)
        config_b = tiny_config("evolve", tmp_path / "b", seed=11, seeds=2)
        run_experiment(config_a)
        run_experiment(config_b)
        tree_a = read_tree(tmp_path / "a")
        tree_b = read_tree(tmp_path / "b")
        assert tree_a.keys() == tree_b.keys()
        for name in tree_a:
            assert tree_a[name] == tree_b[name], name

    def test_multi_seed_emits_one_summary_row_per_run(self, tmp_path):
        config = tiny_config("evolve", tmp_path / "out", seeds=2, policies=2)
        batch = run_experiment(config)
        assert batch["n_runs"] == 4
        assert len(batch["runs"]) == 4
        dirs = sorted(p.name for p in (tmp_path / "out").iterdir() if p.is_dir())
        assert dirs == [
            "run_p00_s00", "run_p00_s01", "run_p01_s00", "run_p01_s01",
        ]

    def test_maxgen_zero_gives_single_entry(self, tmp_path):
        config = tiny_config("evolve", tmp_path / "out", max_generations=0)
        run_experiment(config)
        lines = (tmp_path / "out" / "run_p00_s00" / "lineage.jsonl").read_text().splitlines()
        assert len(lines) == 1

    def test_worker_pool_matches_sequential(self, tmp_path):
        sequential = tiny_config("evolve", tmp_path / "seq", seed=4, workers=0)
        pooled = tiny_config("evolve", tmp_path / "pool", seed=4, workers=2)
        run_experiment(sequential)
        run_experiment(pooled)
        a = read_tree(tmp_path / "seq")
        b = read_tree(tmp_path / "pool")
        assert a.keys() == b.keys()
        for name in a:
            assert a[name] == b[name], name

    def test_prebuilt_dataset_used(self, tmp_path):
        datagen = tiny_config("datagen", tmp_path / "ds", seed=9)
        run_experiment(datagen)
        config = tiny_config("evolve", tmp_path / "out", seed=9, data_dir=str(tmp_path / "ds"))
        batch = run_experiment(config)
        assert batch["n_runs"] == 1


class TestBaselineArtifacts:
    def test_curves_schema(self, tmp_path):
        config = tiny_config("baseline", tmp_path / "out", baseline_epochs=2)
        run_experiment(config)
        with open(tmp_path / "out" / "run_p00_s00" / "curves.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == BASELINE_CSV_COLUMNS
        assert len(rows) == 3
        batch = json.loads((tmp_path / "out" / "batch_summary.json").read_text())
        assert batch["n_runs"] == 1

    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            run_experiment(tiny_config("baseline", tmp_path / name, seed=2, baseline_epochs=2))
        tree_a = read_tree(tmp_path / "a")
        tree_b = read_tree(tmp_path / "b")
        assert tree_a.keys() == tree_b.keys()
        for name in tree_a:
            assert tree_a[name] == tree_b[name]


class TestDatagenMode:
    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            run_experiment(tiny_config("datagen", tmp_path / name, seed=7))
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (
            tmp_path / "b" / "manifest.json"
        ).read_bytes()
        assert (tmp_path / "a" / "data.bin").read_bytes() == (
            tmp_path / "b" / "data.bin"
        ).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        run_experiment(tiny_config("datagen", tmp_path / "a", seed=7))
        run_experiment(tiny_config("datagen", tmp_path / "b", seed=8))
        assert (tmp_path / "a" / "data.bin").read_bytes() != (
            tmp_path / "b" / "data.bin"
        ).read_bytes()


class TestValidatePerf:
    def test_report_fields(self, tmp_path):
        config = tiny_config(
            "validate-perf", tmp_path / "out", perf_organisms=3, workers=1
        )
        report = run_experiment(config)
        assert report["bitwise_identical"] is True
        assert report["organisms"] == 3
        assert report["cache_speedup_sequential"] > 0
        stored = json.loads((tmp_path / "out" / "perf_report.json").read_text())
        assert stored["bitwise_identical"] is True
        uncached = [r for r in stored["configurations"] if not r["cache"]]
        cached = [r for r in stored["configurations"] if r["cache"]]
        assert all(u["compilations"] > c["compilations"] for u, c in zip(uncached, cached))
