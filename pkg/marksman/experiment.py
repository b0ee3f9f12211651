"""Experiment orchestration: train, evaluate and defend per seed, with a manifest."""

import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import pandas as pd

from . import __version__
from .checkpoints import (
    load_classifier,
    load_generator,
    save_classifier,
    save_generator,
)
from .config import ExperimentConfig, config_hash, save_config
from .datasets import LabeledImageSet, get_dataset_spec, load_dataset
from .defenses import make_backdoor_samples, run_defense_suite
from .evaluation import (
    METRIC_COLUMNS,
    all_target_asr,
    clean_accuracy,
    hyperparameter_sweep,
    poison_rate_sweep,
    summarize_seeds,
    transfer_attack,
)
from .exceptions import ConfigurationError, MarksmanError
from .models import DefenseReport, RunManifest, RunRecord
from .networks import ClassifierNet
from .trainer import MarksmanTrainer
from .triggers import Trigger, build_patch_table
from .utils import (
    atomic_torch_save,
    atomic_write_text,
    ensure_directory,
    resolve_device,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SAMPLE_COUNT = 8
ALL_STAGES = ("train", "evaluate", "defend")

Models = Tuple[ClassifierNet, Optional[Trigger]]


class ExperimentRunner:
    """Runs the stages of an experiment and keeps its manifest current."""

    def __init__(
        self,
        config: ExperimentConfig,
        resume: bool = True,
        show_progress: bool = True,
    ):
        """Initialize the runner.

        Args:
            config: Validated experiment configuration
            resume: Reuse checkpoints and the manifest already in ``output_dir``
            show_progress: Display training progress bars

        Raises:
            ConfigurationError: Output directory not writable, or it holds a
                manifest written by a different configuration
        """
        self.config = config
        self.resume = resume
        self.show_progress = show_progress
        self.output_dir = Path(config.output_dir)
        self.device = resolve_device(config.device)
        self.spec = get_dataset_spec(config.dataset)
        self._splits: Dict[str, LabeledImageSet] = {}

        try:
            ensure_directory(self.output_dir)
        except OSError as e:
            raise ConfigurationError(
                f"Cannot create output directory {self.output_dir}: {e}",
                key="output_dir",
            ) from e
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigurationError(
                f"Output directory {self.output_dir} is not writable", key="output_dir"
            )

        self.manifest_path = self.output_dir / MANIFEST_NAME
        self.manifest = self._open_manifest()

    def _open_manifest(self) -> RunManifest:
        digest = config_hash(self.config)
        if self.resume and self.manifest_path.exists():
            manifest = RunManifest.load(self.manifest_path)
            if manifest.config_hash != digest:
                raise ConfigurationError(
                    f"{self.manifest_path} belongs to a different configuration "
                    f"({manifest.config_hash[:12]} != {digest[:12]}); "
                    f"choose another output_dir"
                )
            manifest.finished_at = None
            manifest.failures = []
            logger.info(f"Continuing experiment in {self.output_dir}")
            return manifest
        return RunManifest(
            config_hash=digest, code_version=__version__, config=self.config.to_dict()
        )

    def __enter__(self):
        """Context manager entry."""
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit: the manifest is always flushed."""
        self.write_manifest()

    # Data

    def load_split(self, split: str) -> LabeledImageSet:
        if split not in self._splits:
            data = load_dataset(
                self.config.dataset, split, self.config.resolved_dataset_root()
            )
            if split == "test":
                data = data.head(self.config.evaluation.test_limit)
            self._splits[split] = data
            logger.info(f"Loaded {len(data)} {split} samples of {data.name}")
        return self._splits[split]

    def probe_set(self) -> Optional[LabeledImageSet]:
        size = self.config.train.probe_size
        return self.load_split("test").head(size) if size else None

    # Paths

    def run_name(self, seed: int) -> str:
        return f"{self.config.method}_{self.config.dataset}_seed{seed}"

    def run_dir(self, seed: int) -> Path:
        return ensure_directory(self.output_dir / self.run_name(seed))

    def _run_record(self, seed: int) -> RunRecord:
        name = self.run_name(seed)
        record = self.manifest.get_run(name)
        if record is None:
            record = RunRecord(
                name=name,
                method=self.config.method,
                dataset=self.config.dataset,
                seed=seed,
            )
            self.manifest.runs.append(record)
        return record

    def _register(self, *paths: Path):
        for path in paths:
            self.manifest.add_file(self.output_dir, path)

    def write_manifest(self) -> Path:
        return self.manifest.write(self.manifest_path)

    # Stages

    def train(self, seed: int) -> Models:
        """Train (or resume) the configured method for one seed and save its outputs."""
        directory = self.run_dir(seed)
        train_config = self.config.with_seed(seed)
        trainer = MarksmanTrainer(
            train_config,
            self.spec.num_classes,
            (self.spec.channels, self.spec.size, self.spec.size),
            mode=self.config.method,
            device=self.device,
            checkpoint_path=directory / "train_state.pt",
            num_workers=self.config.num_workers,
            show_progress=self.show_progress,
        )
        result = trainer.fit(
            self.load_split("train"), self.probe_set(), resume=self.resume
        )

        produced = [
            save_classifier(
                directory / "classifier.pt", result.classifier, {"seed": seed}
            ),
            result.history.write_csv(directory / "history.csv"),
            result.history.write_epochs_jsonl(directory / "epochs.jsonl"),
            directory / "train_state.pt",
        ]
        if result.generator is not None:
            produced.append(
                save_generator(
                    directory / "generator.pt", result.generator, {"seed": seed}
                )
            )
        self._register(*produced)
        return result.classifier, result.trigger

    def load_models(self, seed: int) -> Models:
        """Classifier and trigger of a finished training run."""
        directory = self.output_dir / self.run_name(seed)
        classifier, _ = load_classifier(directory / "classifier.pt")
        classifier.to(self.device)
        trigger: Optional[Trigger] = None
        if self.config.method == "marksman":
            generator, _ = load_generator(directory / "generator.pt")
            trigger = generator.to(self.device)
        elif self.config.method == "patchmt":
            trigger = build_patch_table(
                self.spec.num_classes,
                (self.spec.channels, self.spec.size, self.spec.size),
                self.config.train.patch_size,
            )
        return classifier, trigger

    def evaluate(self, seed: int, models: Optional[Models] = None) -> Dict[str, Any]:
        """Write metrics.csv (plus per_class.csv and samples.pt for attacks)."""
        classifier, trigger = models or self.load_models(seed)
        directory = self.run_dir(seed)
        testset = self.load_split("test")
        batch_size = self.config.evaluation.batch_size
        train = self.config.train
        row: Dict[str, Any] = {
            "dataset": self.config.dataset,
            "method": self.config.method,
            "rate": train.poison_rate if self.config.method != "benign" else 0.0,
            "alpha": train.alpha,
            "beta": train.beta,
            "seed": seed,
        }
        produced = []
        if trigger is None:
            clean = clean_accuracy(classifier, testset, batch_size)
            row.update({"clean": clean, "asr": float("nan"), "n_trials": 0})
        else:
            metrics = all_target_asr(classifier, trigger, testset, batch_size)
            row.update(metrics.to_row())
            frame = metrics.per_class_frame()
            per_class_path = directory / "per_class.csv"
            atomic_write_text(
                per_class_path, frame.to_csv(index=False, float_format="%.17g")
            )
            samples_path = self._save_samples(directory, trigger, testset, seed)
            produced += [per_class_path, samples_path]

        metrics_path = directory / "metrics.csv"
        frame = pd.DataFrame([row], columns=METRIC_COLUMNS)
        atomic_write_text(metrics_path, frame.to_csv(index=False, float_format="%.17g"))
        produced.append(metrics_path)
        self._register(*produced)
        logger.info(
            f"{self.run_name(seed)}: clean {row['clean']:.4f}, "
            f"asr {row['asr']:.4f}"
        )
        return row

    def _save_samples(
        self, directory: Path, trigger: Trigger, testset: LabeledImageSet, seed: int
    ) -> Path:
        subset = testset.head(SAMPLE_COUNT)
        backdoor, targets = make_backdoor_samples(trigger, testset, SAMPLE_COUNT, seed)
        path = directory / "samples.pt"
        atomic_torch_save(
            {
                "clean": subset.images,
                "backdoor": backdoor,
                "labels": subset.labels,
                "targets": targets,
            },
            path,
        )
        return path

    def defend(self, seed: int, models: Optional[Models] = None) -> DefenseReport:
        """Run the defense suite for one seed and write its report files."""
        classifier, trigger = models or self.load_models(seed)
        report = run_defense_suite(
            classifier,
            trigger,
            self.load_split("train"),
            self.load_split("test"),
            self.config.defenses,
            seed=seed,
            batch_size=self.config.evaluation.batch_size,
        )
        self._register(*report.write(self.run_dir(seed)))
        return report

    def _stage(self, stage: str, seed: Optional[int], fn: Callable[[], Any]) -> Any:
        """Run ``fn``; a failure is logged and recorded, and gives None."""
        run = self.run_name(seed) if seed is not None else None
        try:
            return fn()
        except (MarksmanError, RuntimeError, OSError, ValueError) as e:
            logger.error(f"[{stage}] {run or 'experiment'} failed: {e}")
            self.manifest.record_failure(stage, str(e), run)
            if seed is not None:
                self._run_record(seed).status = f"failed:{stage}"
            return None
        finally:
            self.write_manifest()

    def run_seed(self, seed: int, stages: Tuple[str, ...] = ALL_STAGES) -> RunRecord:
        record = self._run_record(seed)
        record.status = "running"
        models = None

        if "train" in stages:
            models = self._stage("train", seed, lambda: self.train(seed))
            if models is None:
                return record
        if "evaluate" in stages:
            row = self._stage("evaluate", seed, lambda: self.evaluate(seed, models))
            if row is None:
                return record
            record.metrics = {k: row[k] for k in ("clean", "asr", "n_trials")}
        defend = self.config.defenses.enabled or "train" not in stages
        if "defend" in stages and defend:
            report = self._stage("defend", seed, lambda: self.defend(seed, models))
            if report is None:
                return record
            record.defense = {
                "anomaly_index": (
                    report.neural_cleanse.anomaly_index
                    if report.neural_cleanse
                    else None
                ),
                "strip_auroc": report.strip.auroc if report.strip else None,
            }
        record.status = "completed"
        return record

    def run(self, stages: Tuple[str, ...] = ALL_STAGES) -> RunManifest:
        """Every seed through ``stages``; returns the finished manifest."""
        save_path = save_config(self.config, self.output_dir / "config.yaml")
        self._register(save_path)
        for seed in self.config.seeds:
            logger.info(f"Starting {self.run_name(seed)}")
            self.run_seed(seed, stages)
        self._summarise()
        self.manifest.finished_at = datetime.now()
        self.write_manifest()
        return self.manifest

    def _summarise(self):
        rows = [r.metrics for r in self.manifest.runs if r.metrics]
        if rows:
            self.manifest.summaries = summarize_seeds(rows)

    def sweep(self) -> Optional[pd.DataFrame]:
        """Poisoning-rate sweep, then the alpha/beta sweep, written to sweep.csv."""

        def _sweep() -> pd.DataFrame:
            base = self.config.with_seed(self.config.seeds[0])
            train, test = self.load_split("train"), self.load_split("test")
            options = self.config.sweep
            batch_size = self.config.evaluation.batch_size
            frames = [
                poison_rate_sweep(
                    base,
                    options.poison_rates,
                    train,
                    test,
                    self.config.method,
                    self.device,
                    batch_size,
                )
            ]
            if self.config.method == "marksman" and (options.alphas or options.betas):
                frames.append(
                    hyperparameter_sweep(
                        base,
                        options.alphas,
                        options.betas,
                        train,
                        test,
                        options.fixed_alpha,
                        options.fixed_beta,
                        self.device,
                        batch_size,
                    )
                )
            frame = pd.concat(frames, ignore_index=True)
            path = self.output_dir / "sweep.csv"
            atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
            self._register(path)
            return frame

        result = self._stage("sweep", None, _sweep)
        self.manifest.finished_at = datetime.now()
        self.write_manifest()
        return result

    def transfer(self) -> Optional[pd.DataFrame]:
        """Retrain each configured architecture against every frozen generator."""

        def _transfer() -> pd.DataFrame:
            if self.config.method != "marksman":
                raise ConfigurationError(
                    "Transfer needs a marksman run with a trained generator",
                    key="method",
                )
            train, test = self.load_split("train"), self.load_split("test")
            rows: List[Dict[str, Any]] = []
            for seed in self.config.seeds:
                path = self.output_dir / self.run_name(seed) / "generator.pt"
                generator, _ = load_generator(path)
                generator.to(self.device)
                for arch in self.config.transfer.archs:
                    metrics = transfer_attack(
                        generator,
                        arch,
                        train,
                        test,
                        self.config.with_seed(seed),
                        seed=seed + self.config.transfer.seed_offset,
                        device=self.device,
                        batch_size=self.config.evaluation.batch_size,
                    )
                    rows.append(
                        {
                            "dataset": self.config.dataset,
                            "source_seed": seed,
                            "arch": arch,
                            "clean": metrics.clean_accuracy,
                            "asr": metrics.asr,
                            "n_trials": metrics.n_trials,
                        }
                    )
            frame = pd.DataFrame(rows)
            path = self.output_dir / "transfer.csv"
            atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
            self._register(path)
            return frame

        result = self._stage("transfer", None, _transfer)
        self.manifest.finished_at = datetime.now()
        self.write_manifest()
        return result


def run_experiment(
    config: ExperimentConfig, resume: bool = True, show_progress: bool = True
) -> RunManifest:
    """Train, evaluate and (if enabled) defend every seed of ``config``.

    Stage failures do not raise: they are recorded in the returned manifest
    and the outputs written so far are kept.
    """
    with ExperimentRunner(config, resume=resume, show_progress=show_progress) as runner:
        return runner.run()
