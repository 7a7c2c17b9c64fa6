"""
SCA Lab - Experiment Runner

This module provides the command-line entry point. Each subcommand reads a
JSON experiment configuration, builds the schedule, dataset, denoiser and
target classifier, and writes a timestamped, self-describing run directory.

Subcommands:
    invert   noise-map stacks and reconstruction report
    attack   adversarial examples, per-image traces and summary
    eval     estimator ablation (none, skip-gradient, rgf)
    bench    wall time and denoiser calls per adversarial example across T
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError
from tqdm import tqdm

from sca_attack import AttackResult, SemanticAttacker
from sca_chain import denoise_chain, invert, save_stack, z_variance
from sca_classifier import Classifier, LabeledDataset, classifier_from_config, save_classifier
from sca_data import fit_denoiser, load_idx, synth_dataset, write_image
from sca_denoiser import DenoiserCallCounter, DenoiserModel
from sca_metrics import SCAResultsProcessor
from sca_models import ExperimentConfig, Sample
from sca_schedule import NoiseSchedule, schedule_from_config

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

THREADS_ENV = "SCA_LAB_MAX_THREADS"
FLOAT_FORMAT = "%.17g"
ESTIMATORS = ("none", "skip-gradient", "rgf")


class ConfigError(ValueError):
    """Raised for unreadable or schema-violating configuration"""


def load_config(path: Union[str, Path], seed: Optional[int] = None) -> ExperimentConfig:
    """
    Read and validate an experiment configuration

    Args:
        path: JSON file
        seed: optional override of the global seed

    Returns:
        validated ExperimentConfig
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()]
        raise ConfigError(f"invalid config {path}:\n  " + "\n  ".join(problems)) from e
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    return config


def max_threads() -> int:
    load_dotenv()
    value = os.getenv(THREADS_ENV, "1")
    try:
        threads = int(value)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{value}'") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


def image_seed(global_seed: int, index: int) -> int:
    """Per-image seed independent of execution order"""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


@dataclass
class Workbench:
    """Everything a run needs, built once from the configuration"""

    config: ExperimentConfig
    schedule: NoiseSchedule
    model: DenoiserModel
    dataset: LabeledDataset
    classifier: Classifier

    def images(self) -> List[Tuple[Sample, int]]:
        n = min(self.config.num_images, len(self.dataset))
        return [(self.dataset.samples[i], self.dataset.labels[i]) for i in range(n)]


def build_workbench(config: ExperimentConfig, schedule: Optional[NoiseSchedule] = None) -> Workbench:
    if config.dataset.synth is not None:
        dataset, model = synth_dataset(config.dataset.synth, config.seed)
    else:
        dataset = load_idx(config.dataset.idx.images_path, config.dataset.idx.labels_path)
        model = fit_denoiser(dataset)
    if config.condition.mode == "label":
        missing = sorted(set(dataset.labels) - set(model.class_ids))
        if missing:
            raise ConfigError(f"condition.mode: labels {missing} have no class in the denoiser")
    classifier = classifier_from_config(dataset, config.classifier)
    return Workbench(
        config=config,
        schedule=schedule or schedule_from_config(config.schedule),
        model=model,
        dataset=dataset,
        classifier=classifier,
    )


def attack_images(bench: Workbench, estimator: Optional[str] = None, threads: int = 1, desc: str = "attack") -> List[AttackResult]:
    """Attack every configured image; results are in image order for any thread count"""
    config = bench.config
    items = bench.images()

    def attack_one(index: int) -> AttackResult:
        x0, y = items[index]
        update: Dict[str, Any] = {"rng_seed": image_seed(config.seed, index)}
        if estimator is not None:
            update["estimator"] = estimator
        attacker = SemanticAttacker(
            bench.model.with_counter(DenoiserCallCounter()),
            bench.classifier,
            bench.schedule,
            config.attack.model_copy(update=update),
            solver=config.chain.solver,
            prediction=config.chain.prediction,
        )
        return attacker.run(x0, y, config.condition.condition_for(y))

    indices = range(len(items))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(tqdm(pool.map(attack_one, indices), total=len(items), desc=desc))
    return [attack_one(i) for i in tqdm(indices, desc=desc)]


def _write_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


class RunDirectory:
    """Timestamped output directory with config snapshot, manifest and FAILED marker"""

    def __init__(self, parent: Union[str, Path], command: str, config: ExperimentConfig):
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        self.path = Path(parent) / f"{command}-{stamp}"
        self.path.mkdir(parents=True, exist_ok=False)
        self.command = command
        self.config = config
        self.started = datetime.now().isoformat()
        (self.path / "config.json").write_text(config.model_dump_json(indent=2))

    def file(self, name: str) -> Path:
        return self.path / name

    def write_manifest(self, images: int, extra: Optional[Dict[str, Any]] = None):
        """Write manifest.json; image_seeds covers the first `images` images actually processed"""
        manifest = {
            "version": __version__,
            "command": self.command,
            "seed": self.config.seed,
            "image_seeds": [image_seed(self.config.seed, i) for i in range(images)],
            "started": self.started,
            "finished": datetime.now().isoformat(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
        }
        manifest.update(extra or {})
        self.file("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def mark_failed(self, error: BaseException):
        self.file("FAILED").write_text(f"{type(error).__name__}: {error}\n")


def _image_suffix(x: Sample) -> str:
    return "pgm" if x.shape[2] == 1 else "ppm"


def _write_attack_outputs(run: RunDirectory, bench: Workbench, results: Sequence[AttackResult], prefix: str = ""):
    for i, (result, (x0, _)) in enumerate(zip(results, bench.images())):
        _write_csv(result.trace, run.file(f"{prefix}trace_{i}.csv"))
        if bench.config.write_images and x0.shape[2] in (1, 3):
            ext = _image_suffix(x0)
            write_image(x0, run.file(f"{prefix}clean_{i}.{ext}"))
            write_image(result.reconstruction, run.file(f"{prefix}reconstruction_{i}.{ext}"))
            write_image(result.adversarial, run.file(f"{prefix}adversarial_{i}.{ext}"))


def run_experiment(config: ExperimentConfig, out: Optional[str] = None, threads: int = 1) -> Path:
    """
    Attack the configured images and write summary, traces and images

    Args:
        config: validated experiment configuration
        out: parent directory overriding config.output_dir
        threads: worker threads for per-image attacks

    Returns:
        the run directory
    """
    run = RunDirectory(out or config.output_dir, "attack", config)
    try:
        bench = build_workbench(config)
        results = attack_images(bench, threads=threads)
        processor = SCAResultsProcessor(budget=config.attack.budget)
        _write_csv(processor.build_summary(results), run.file("summary.csv"))
        _write_attack_outputs(run, bench, results)
        save_classifier(bench.classifier, run.file("classifier.scab"))
        analysis = processor.analyze_results()
        analysis["train_accuracy"] = bench.classifier.train_accuracy
        run.write_manifest(len(results), {"schedule_id": bench.schedule.schedule_id, "analysis": analysis})
        logger.info(f"Attack run finished: ASR={analysis['asr']:.3f} clean_error={analysis['clean_error']:.3f} -> {run.path}")
    except Exception as e:
        logger.error(f"Attack run failed: {e}")
        run.mark_failed(e)
        raise
    return run.path


def run_inversion(config: ExperimentConfig, out: Optional[str] = None) -> Path:
    """Invert the configured images, save their stacks and a reconstruction report"""
    run = RunDirectory(out or config.output_dir, "invert", config)
    try:
        bench = build_workbench(config)
        rows = []
        for i, (x0, y) in enumerate(tqdm(bench.images(), desc="invert")):
            cond = config.condition.condition_for(y)
            stack = invert(x0, cond, bench.model, bench.schedule, image_seed(config.seed, i),
                           config.chain.solver, config.chain.prediction)
            recon = denoise_chain(stack, bench.model, None, bench.schedule)
            save_stack(stack, run.file(f"stack_{i}.scab"))
            variance = z_variance(stack)
            interior = variance[1:-1] if stack.T > 2 else variance
            rows.append({
                "index": i,
                "label": y,
                "max_abs_error": float(np.abs(recon.data - x0.data).max()),
                "mean_z_var": float(np.mean(interior)),
            })
        _write_csv(pd.DataFrame(rows, columns=["index", "label", "max_abs_error", "mean_z_var"]), run.file("inversion.csv"))
        run.write_manifest(len(rows), {"schedule_id": bench.schedule.schedule_id})
        logger.info(f"Inverted {len(rows)} images -> {run.path}")
    except Exception as e:
        logger.error(f"Inversion run failed: {e}")
        run.mark_failed(e)
        raise
    return run.path


def run_ablation(config: ExperimentConfig, out: Optional[str] = None, threads: int = 1) -> Path:
    """Attack the same images once per estimator and write ablation.csv"""
    run = RunDirectory(out or config.output_dir, "eval", config)
    try:
        bench = build_workbench(config)
        processor = SCAResultsProcessor(budget=config.attack.budget)
        analyses = {}
        for estimator in ESTIMATORS:
            results = attack_images(bench, estimator=estimator, threads=threads, desc=estimator)
            _write_csv(processor.build_summary(results), run.file(f"summary_{estimator}.csv"))
            analyses[estimator] = processor.analyze_results()
            logger.info(f"Estimator {estimator}: ASR={analyses[estimator]['asr']:.3f}")
        _write_csv(processor.ablation_table(analyses), run.file("ablation.csv"))
        run.write_manifest(len(bench.images()), {"schedule_id": bench.schedule.schedule_id, "analysis": analyses})
    except Exception as e:
        logger.error(f"Ablation run failed: {e}")
        run.mark_failed(e)
        raise
    return run.path


def bench(config: ExperimentConfig, step_counts: Optional[Sequence[int]] = None, out: Optional[str] = None) -> pd.DataFrame:
    """
    Wall time and denoiser calls per adversarial example for each T

    Args:
        config: experiment configuration; attack settings are held fixed
        step_counts: T values, at least two; defaults to config.bench.step_counts
        out: parent directory for the bench run

    Returns:
        report with one row per T and ratios relative to the first T
    """
    steps = list(step_counts if step_counts is not None else config.bench.step_counts)
    if len(steps) < 2:
        raise ConfigError(f"bench needs at least two step counts, got {steps}")
    run = RunDirectory(out or config.output_dir, "bench", config)
    try:
        rows = []
        base = build_workbench(config.model_copy(update={"num_images": config.bench.images}))
        for T in steps:
            schedule = schedule_from_config(config.schedule.model_copy(update={"T": T}))
            workbench = Workbench(
                config=base.config,
                schedule=schedule,
                model=base.model,
                dataset=base.dataset,
                classifier=base.classifier,
            )
            started = time.perf_counter()
            results = attack_images(workbench, desc=f"T={T}")
            elapsed = time.perf_counter() - started
            calls = [sum(r.denoiser_calls.values()) for r in results]
            rows.append({
                "T": T,
                "images": len(results),
                "seconds_per_example": elapsed / len(results),
                "denoiser_calls_per_example": float(np.mean(calls)),
            })
        report = pd.DataFrame(rows)
        report["call_ratio"] = report["denoiser_calls_per_example"] / report["denoiser_calls_per_example"].iloc[0]
        report["time_ratio"] = report["seconds_per_example"] / report["seconds_per_example"].iloc[0]
        _write_csv(report, run.file("bench.csv"))
        run.write_manifest(len(base.images()), {"step_counts": steps})
        logger.info(f"Bench finished:\n{report.to_string(index=False)}")
    except Exception as e:
        logger.error(f"Bench failed: {e}")
        run.mark_failed(e)
        raise
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sca-lab", description="Latent inversion and semantic attack experiments")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("invert", "invert images into noise-map stacks"),
        ("attack", "generate adversarial examples"),
        ("eval", "estimator ablation"),
        ("bench", "time adversarial examples across step counts"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="experiment configuration (JSON)")
        sub.add_argument("--out", default=None, help="parent directory for the run directory")
        sub.add_argument("--seed", type=int, default=None, help="override the configured global seed")
        sub.add_argument("--verbose", action="store_true", help="debug logging")
        if name == "bench":
            sub.add_argument("--steps", type=int, nargs="+", default=None, help="step counts to compare")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = load_config(args.config, args.seed)
        threads = max_threads()
        if args.command == "invert":
            run_inversion(config, args.out)
        elif args.command == "attack":
            run_experiment(config, args.out, threads)
        elif args.command == "eval":
            run_ablation(config, args.out, threads)
        else:
            bench(config, args.steps, args.out)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
