"""Marksman - arbitrary-target class-conditional backdoor attacks and evaluation."""

__version__ = "0.1.0"
__author__ = "Marksman Team"

from .config import ExperimentConfig, TrainConfig, parse_config
from .datasets import LabeledImageSet, load_dataset
from .defenses import (
    fine_pruning,
    neural_cleanse,
    run_defense_suite,
    spectral_signature,
    strip_entropy,
)
from .evaluation import (
    all_target_asr,
    clean_accuracy,
    poison_rate_sweep,
    transfer_attack,
)
from .experiment import ExperimentRunner, run_experiment
from .models import AttackMetrics, DefenseReport, RunManifest, TrainHistory
from .networks import build_classifier
from .reports import ReportGenerator, emit_report
from .trainer import MarksmanTrainer, marksman_train
from .triggers import (
    ConditionalTriggerGenerator,
    apply_trigger,
    build_generator,
    generate_pattern,
)

__all__ = [
    "ExperimentConfig",
    "TrainConfig",
    "parse_config",
    "LabeledImageSet",
    "load_dataset",
    "fine_pruning",
    "neural_cleanse",
    "run_defense_suite",
    "spectral_signature",
    "strip_entropy",
    "all_target_asr",
    "clean_accuracy",
    "poison_rate_sweep",
    "transfer_attack",
    "ExperimentRunner",
    "run_experiment",
    "AttackMetrics",
    "DefenseReport",
    "RunManifest",
    "TrainHistory",
    "build_classifier",
    "ReportGenerator",
    "emit_report",
    "MarksmanTrainer",
    "marksman_train",
    "ConditionalTriggerGenerator",
    "apply_trigger",
    "build_generator",
    "generate_pattern",
]
