"""
Test cases for the experiment runner and its run directories
"""

import json
from pathlib import Path

import pandas as pd
import pytest

from sca_cli import (
    THREADS_ENV,
    ConfigError,
    attack_images,
    bench,
    build_parser,
    build_workbench,
    image_seed,
    load_config,
    main,
    max_threads,
    run_ablation,
    run_experiment,
    run_inversion,
)

SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


def smoke_config(**updates):
    config = load_config(SMOKE)
    return config.model_copy(update=updates) if updates else config


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return path


class TestConfig:
    """Test cases for configuration loading"""

    def test_smoke_config_loads(self):
        config = load_config(SMOKE)
        assert config.schedule.T == 10
        assert config.num_images == 3

    def test_seed_override(self):
        assert load_config(SMOKE, seed=42).seed == 42

    def test_error_names_field_path(self, tmp_path):
        raw = json.loads(SMOKE.read_text())
        raw["attack"]["budgett"] = 0.2
        with pytest.raises(ConfigError) as info:
            load_config(write_json(tmp_path / "bad.json", raw))
        assert "attack.budgett" in str(info.value)

    def test_unreadable_config(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_thread_setting(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert max_threads() == 3
        monkeypatch.setenv(THREADS_ENV, "0")
        with pytest.raises(ConfigError):
            max_threads()
        monkeypatch.setenv(THREADS_ENV, "many")
        with pytest.raises(ConfigError):
            max_threads()

    def test_image_seeds(self):
        assert image_seed(0, 1) == image_seed(0, 1)
        assert image_seed(0, 1) != image_seed(0, 2)
        assert image_seed(0, 1) != image_seed(1, 1)


class TestAttackRun:
    """Test cases for the attack subcommand"""

    def test_writes_run_directory(self, tmp_path):
        run = run_experiment(smoke_config(), out=str(tmp_path))
        assert run.parent == tmp_path
        assert run.name.startswith("attack-")
        for name in ("config.json", "summary.csv", "manifest.json", "classifier.scab", "trace_0.csv", "adversarial_2.pgm"):
            assert (run / name).exists(), name
        assert not (run / "FAILED").exists()
        summary = pd.read_csv(run / "summary.csv")
        assert len(summary) == 3
        assert (summary["max_linf_delta"] <= 0.1).all()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["command"] == "attack"
        assert manifest["analysis"]["budget_violations"] == 0
        trace = pd.read_csv(run / "trace_0.csv")
        assert list(trace.columns) == ["iter", "loss", "pred", "linf_delta", "l2_image"]

    def test_summary_is_reproducible(self, tmp_path):
        first = run_experiment(smoke_config(), out=str(tmp_path / "a"))
        second = run_experiment(smoke_config(), out=str(tmp_path / "b"))
        assert (first / "summary.csv").read_bytes() == (second / "summary.csv").read_bytes()

    def test_threads_do_not_change_summary(self, tmp_path):
        serial = run_experiment(smoke_config(), out=str(tmp_path / "a"), threads=1)
        threaded = run_experiment(smoke_config(), out=str(tmp_path / "b"), threads=3)
        assert (serial / "summary.csv").read_bytes() == (threaded / "summary.csv").read_bytes()

    def test_threads_count_denoiser_calls_per_image(self):
        """Each image reports 2T + iterations (N + 1) T calls whatever the thread count"""
        workbench = build_workbench(smoke_config())
        expected = 2 * 10 + 3 * (8 + 1) * 10
        serial = attack_images(workbench, threads=1)
        threaded = attack_images(workbench, threads=3)
        assert [sum(r.denoiser_calls.values()) for r in serial] == [expected] * 3
        assert [r.denoiser_calls for r in threaded] == [r.denoiser_calls for r in serial]

    def test_manifest_seeds_follow_attacked_images(self, tmp_path):
        raw = json.loads(SMOKE.read_text())
        raw["dataset"]["synth"]["samples_per_class"] = 2
        raw["num_images"] = 10
        config = load_config(write_json(tmp_path / "small.json", raw))
        run = run_experiment(config, out=str(tmp_path / "runs"))
        summary = pd.read_csv(run / "summary.csv")
        manifest = json.loads((run / "manifest.json").read_text())
        assert len(summary) == 4
        assert manifest["image_seeds"] == [image_seed(config.seed, i) for i in range(4)]

    def test_no_estimator_success_equals_clean_error(self, tmp_path):
        config = smoke_config()
        config = config.model_copy(update={"attack": config.attack.model_copy(update={"estimator": "none"})})
        run = run_experiment(config, out=str(tmp_path))
        analysis = json.loads((run / "manifest.json").read_text())["analysis"]
        assert analysis["asr"] == analysis["clean_error"]

    def test_failed_marker(self, tmp_path):
        raw = json.loads(SMOKE.read_text())
        raw["dataset"] = {"idx": {"images_path": str(tmp_path / "missing-images"), "labels_path": str(tmp_path / "missing-labels")}}
        config = load_config(write_json(tmp_path / "idx.json", raw))
        with pytest.raises(OSError):
            run_experiment(config, out=str(tmp_path / "runs"))
        (run,) = list((tmp_path / "runs").glob("attack-*"))
        assert (run / "FAILED").exists()
        assert (run / "config.json").exists()


class TestOtherCommands:
    """Test cases for invert, eval and bench"""

    def test_inversion_report(self, tmp_path):
        run = run_inversion(smoke_config(num_images=2), out=str(tmp_path))
        report = pd.read_csv(run / "inversion.csv")
        assert list(report.columns) == ["index", "label", "max_abs_error", "mean_z_var"]
        assert (report["max_abs_error"] <= 1e-8).all()
        assert (run / "stack_1.scab").exists()

    def test_ablation_table(self, tmp_path):
        run = run_ablation(smoke_config(num_images=2), out=str(tmp_path))
        table = pd.read_csv(run / "ablation.csv")
        assert list(table["estimator"]) == ["none", "skip-gradient", "rgf"]
        for estimator in ("none", "skip-gradient", "rgf"):
            assert (run / f"summary_{estimator}.csv").exists()

    def test_bench_needs_two_step_counts(self, tmp_path):
        with pytest.raises(ConfigError):
            bench(smoke_config(), step_counts=[10], out=str(tmp_path))

    def test_bench_call_ratio(self, tmp_path):
        report = bench(smoke_config(), step_counts=[3, 30], out=str(tmp_path))
        assert list(report["T"]) == [3, 30]
        assert report["call_ratio"].iloc[1] == 10.0
        assert (next(tmp_path.glob("bench-*")) / "bench.csv").exists()


class TestMain:
    """Test cases for the command-line entry point"""

    def test_parser(self):
        args = build_parser().parse_args(["bench", "--config", "c.json", "--steps", "5", "50"])
        assert args.command == "bench"
        assert args.steps == [5, 50]

    def test_bad_config_returns_one(self, tmp_path):
        path = write_json(tmp_path / "bad.json", {"dataset": {}})
        assert main(["attack", "--config", str(path), "--out", str(tmp_path)]) == 1

    def test_attack_returns_zero(self, tmp_path, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "1")
        assert main(["attack", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("attack-*"))) == 1
