"""Experiment configuration: defaults, YAML parsing, validation and hashing."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Union

import yaml

from .datasets import DATASETS, get_dataset_spec
from .exceptions import ConfigurationError
from .networks import ARCHITECTURES
from .utils import canonical_hash, deep_merge, load_yaml

logger = logging.getLogger(__name__)

METHODS = ("marksman", "patchmt", "benign")
LOSS_WEIGHTINGS = ("convex", "additive")
DATA_ROOT_ENV = "MARKSMAN_DATA_ROOT"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

# Keys that do not influence results and are left out of the config hash.
NON_SEMANTIC_KEYS = ("output_dir", "dataset_root", "device", "num_workers", "logging")


class _Section:
    """Mixin giving dataclass sections strict dict conversion."""

    NESTED: ClassVar[Dict[str, type]] = {}

    def to_dict(self) -> Dict[str, Any]:
        result = {}
        for f in dataclasses.fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            if isinstance(value, _Section):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            result[f.name] = value
        return result

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], section: str = ""):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError(
                f"Section '{section}' must be a mapping", key=section
            )
        names = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
        kwargs = {}
        for key, value in data.items():
            dotted = f"{section}.{key}" if section else key
            if key not in names:
                raise ConfigurationError(
                    f"Unknown configuration key '{dotted}'", key=dotted
                )
            if key in cls.NESTED:
                nested = cls.NESTED[key]
                value = nested.from_dict(value, dotted)  # type: ignore[attr-defined]
            kwargs[key] = value
        return cls(**kwargs)  # type: ignore[call-arg]


def _check(condition: bool, key: str, constraint: str, value: Any):
    if not condition:
        raise ConfigurationError(f"{key} must be {constraint}, got {value!r}", key=key)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_int(value: Any, key: str, minimum: Optional[int] = None):
    if minimum is None:
        _check(_is_int(value), key, "an integer", value)
    else:
        _check(
            _is_int(value) and value >= minimum,
            key,
            f"an integer >= {minimum}",
            value,
        )


def _check_fraction(value: Any, key: str):
    _check(_is_number(value) and 0.0 <= value <= 1.0, key, "in [0, 1]", value)


def _check_positive(value: Any, key: str):
    _check(_is_number(value) and value > 0, key, "> 0", value)


def _check_non_negative(value: Any, key: str):
    _check(_is_number(value) and value >= 0, key, ">= 0", value)


@dataclass
class TrainConfig(_Section):
    """Hyperparameters of the joint poisoning objective and its optimisation."""

    arch: Optional[str] = None
    alpha: float = 0.8
    beta: float = 1.0
    epsilon: float = 0.05
    classifier_lr: float = 0.01
    trigger_lr: Optional[float] = None
    sync_every: Optional[int] = None
    iterations: Optional[int] = None
    batch_size: int = 128
    poison_rate: float = 0.1
    lr_milestones: List[int] = field(default_factory=lambda: [10, 20, 30, 40])
    lr_decay: float = 0.1
    momentum: float = 0.9
    epochs: int = 50
    seed: int = 0
    trigger_follows_schedule: bool = True
    all_targets: bool = False
    loss_weighting: str = "convex"
    weight_decay: float = 0.0
    divergence_patience: int = 3
    checkpoint_every: int = 10
    augment: bool = True
    patch_size: int = 3
    fixed_target: Optional[int] = None
    probe_size: int = 500

    @property
    def effective_trigger_lr(self) -> float:
        return self.classifier_lr if self.trigger_lr is None else self.trigger_lr

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def validate(self, prefix: str = "train") -> "TrainConfig":
        """Check every range constraint; returns self for chaining."""
        p = prefix
        if self.arch is not None:
            _check(
                self.arch in ARCHITECTURES,
                f"{p}.arch",
                f"one of {list(ARCHITECTURES)}",
                self.arch,
            )
        _check_fraction(self.alpha, f"{p}.alpha")
        _check_non_negative(self.beta, f"{p}.beta")
        _check_positive(self.epsilon, f"{p}.epsilon")
        _check_positive(self.classifier_lr, f"{p}.classifier_lr")
        if self.trigger_lr is not None:
            _check_positive(self.trigger_lr, f"{p}.trigger_lr")
        if self.sync_every is not None:
            _check_int(self.sync_every, f"{p}.sync_every", 1)
        if self.iterations is not None:
            _check_int(self.iterations, f"{p}.iterations", 1)
        _check_int(self.batch_size, f"{p}.batch_size", 1)
        _check_fraction(self.poison_rate, f"{p}.poison_rate")
        _check(
            isinstance(self.lr_milestones, (list, tuple))
            and all(_is_int(m) and m >= 1 for m in self.lr_milestones)
            and list(self.lr_milestones) == sorted(self.lr_milestones),
            f"{p}.lr_milestones",
            "an ascending list of positive epoch numbers",
            self.lr_milestones,
        )
        self.lr_milestones = list(self.lr_milestones)
        _check(
            _is_number(self.lr_decay) and 0.0 < self.lr_decay <= 1.0,
            f"{p}.lr_decay",
            "in (0, 1]",
            self.lr_decay,
        )
        _check(
            _is_number(self.momentum) and 0.0 <= self.momentum < 1.0,
            f"{p}.momentum",
            "in [0, 1)",
            self.momentum,
        )
        _check_int(self.epochs, f"{p}.epochs", 1)
        _check_int(self.seed, f"{p}.seed")
        _check(
            self.loss_weighting in LOSS_WEIGHTINGS,
            f"{p}.loss_weighting",
            f"one of {list(LOSS_WEIGHTINGS)}",
            self.loss_weighting,
        )
        _check_non_negative(self.weight_decay, f"{p}.weight_decay")
        _check_int(self.divergence_patience, f"{p}.divergence_patience", 1)
        _check_int(self.checkpoint_every, f"{p}.checkpoint_every", 1)
        _check_int(self.patch_size, f"{p}.patch_size", 1)
        if self.fixed_target is not None:
            _check(
                _is_int(self.fixed_target) and self.fixed_target >= 0,
                f"{p}.fixed_target",
                "a class index",
                self.fixed_target,
            )
        _check_int(self.probe_size, f"{p}.probe_size", 0)
        for flag in ("trigger_follows_schedule", "all_targets", "augment"):
            value = getattr(self, flag)
            _check(isinstance(value, bool), f"{p}.{flag}", "a boolean", value)
        return self


@dataclass
class EvaluationOptions(_Section):
    batch_size: int = 256
    test_limit: Optional[int] = None

    def validate(self) -> "EvaluationOptions":
        _check_int(self.batch_size, "evaluation.batch_size", 1)
        if self.test_limit is not None:
            _check_int(self.test_limit, "evaluation.test_limit", 1)
        return self


@dataclass
class NeuralCleanseOptions(_Section):
    """Trigger reverse-engineering budget."""

    epochs: int = 100
    lr: float = 0.1
    init_cost: float = 1e-3
    cost_multiplier: float = 1.5
    patience: int = 5
    attack_threshold: float = 0.99
    batch_size: int = 128

    def validate(self) -> "NeuralCleanseOptions":
        p = "defenses.neural_cleanse"
        _check_int(self.epochs, f"{p}.epochs", 1)
        _check_positive(self.lr, f"{p}.lr")
        _check_non_negative(self.init_cost, f"{p}.init_cost")
        _check(
            _is_number(self.cost_multiplier) and self.cost_multiplier > 1,
            f"{p}.cost_multiplier",
            "> 1",
            self.cost_multiplier,
        )
        _check_int(self.patience, f"{p}.patience", 1)
        _check(
            _is_number(self.attack_threshold) and 0 < self.attack_threshold <= 1,
            f"{p}.attack_threshold",
            "in (0, 1]",
            self.attack_threshold,
        )
        _check_int(self.batch_size, f"{p}.batch_size", 1)
        return self


@dataclass
class StripOptions(_Section):
    n_perturb: int = 100
    blend: float = 0.5
    queries: int = 500

    def validate(self) -> "StripOptions":
        p = "defenses.strip"
        _check_int(self.n_perturb, f"{p}.n_perturb", 1)
        _check_fraction(self.blend, f"{p}.blend")
        _check_int(self.queries, f"{p}.queries", 1)
        return self


@dataclass
class SpectralOptions(_Section):
    per_class: bool = False
    bins: int = 50

    def validate(self) -> "SpectralOptions":
        _check(
            isinstance(self.per_class, bool),
            "defenses.spectral.per_class",
            "a boolean",
            self.per_class,
        )
        _check_int(self.bins, "defenses.spectral.bins", 1)
        return self


@dataclass
class FinePruningOptions(_Section):
    ratios: List[float] = field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(10)]
    )

    def validate(self) -> "FinePruningOptions":
        key = "defenses.fine_pruning.ratios"
        _check(
            isinstance(self.ratios, (list, tuple))
            and len(self.ratios) > 0
            and all(_is_number(r) and 0 <= r <= 1 for r in self.ratios),
            key,
            "a non-empty list of fractions in [0, 1]",
            self.ratios,
        )
        _check(
            list(self.ratios) == sorted(self.ratios) and self.ratios[0] == 0,
            key,
            "ascending and start at 0",
            self.ratios,
        )
        self.ratios = list(self.ratios)
        return self


@dataclass
class DefenseOptions(_Section):
    NESTED: ClassVar[Dict[str, type]] = {
        "neural_cleanse": NeuralCleanseOptions,
        "strip": StripOptions,
        "spectral": SpectralOptions,
        "fine_pruning": FinePruningOptions,
    }

    enabled: bool = False
    clean_samples: int = 5000
    backdoor_samples: int = 500
    neural_cleanse: NeuralCleanseOptions = field(default_factory=NeuralCleanseOptions)
    strip: StripOptions = field(default_factory=StripOptions)
    spectral: SpectralOptions = field(default_factory=SpectralOptions)
    fine_pruning: FinePruningOptions = field(default_factory=FinePruningOptions)

    def validate(self) -> "DefenseOptions":
        _check(
            isinstance(self.enabled, bool),
            "defenses.enabled",
            "a boolean",
            self.enabled,
        )
        _check_int(self.clean_samples, "defenses.clean_samples", 1)
        _check_int(self.backdoor_samples, "defenses.backdoor_samples", 1)
        self.neural_cleanse.validate()
        self.strip.validate()
        self.spectral.validate()
        self.fine_pruning.validate()
        return self


@dataclass
class SweepOptions(_Section):
    poison_rates: List[float] = field(
        default_factory=lambda: [0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
    )
    alphas: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    betas: List[float] = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 5.0])
    fixed_alpha: float = 0.8
    fixed_beta: float = 1.0

    def validate(self) -> "SweepOptions":
        _check(
            all(_is_number(r) and 0 <= r <= 1 for r in self.poison_rates),
            "sweep.poison_rates",
            "fractions in [0, 1]",
            self.poison_rates,
        )
        _check(
            all(_is_number(a) and 0 <= a <= 1 for a in self.alphas),
            "sweep.alphas",
            "values in [0, 1]",
            self.alphas,
        )
        _check(
            all(_is_number(b) and b >= 0 for b in self.betas),
            "sweep.betas",
            "values >= 0",
            self.betas,
        )
        _check_fraction(self.fixed_alpha, "sweep.fixed_alpha")
        _check_non_negative(self.fixed_beta, "sweep.fixed_beta")
        return self


@dataclass
class TransferOptions(_Section):
    archs: List[str] = field(default_factory=lambda: ["mnist_cnn", "small_conv_alt"])
    seed_offset: int = 1000

    def validate(self) -> "TransferOptions":
        _check(
            len(self.archs) > 0 and all(a in ARCHITECTURES for a in self.archs),
            "transfer.archs",
            f"a non-empty list drawn from {list(ARCHITECTURES)}",
            self.archs,
        )
        _check_int(self.seed_offset, "transfer.seed_offset")
        return self


@dataclass
class LoggingOptions(_Section):
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: Optional[str] = None

    def validate(self) -> "LoggingOptions":
        _check(
            str(self.level).upper() in LOG_LEVELS,
            "logging.level",
            "a logging level name",
            self.level,
        )
        return self


@dataclass
class ExperimentConfig(_Section):
    """Everything needed to reproduce a run."""

    NESTED: ClassVar[Dict[str, type]] = {
        "train": TrainConfig,
        "evaluation": EvaluationOptions,
        "defenses": DefenseOptions,
        "sweep": SweepOptions,
        "transfer": TransferOptions,
        "logging": LoggingOptions,
    }

    dataset: str = "mnist"
    method: str = "marksman"
    dataset_root: Optional[str] = None
    output_dir: str = "runs"
    seeds: List[int] = field(default_factory=lambda: [0])
    device: str = "auto"
    num_workers: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationOptions = field(default_factory=EvaluationOptions)
    defenses: DefenseOptions = field(default_factory=DefenseOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)
    transfer: TransferOptions = field(default_factory=TransferOptions)
    logging: LoggingOptions = field(default_factory=LoggingOptions)

    def validate(self) -> "ExperimentConfig":
        _check(
            self.dataset in DATASETS,
            "dataset",
            f"one of {sorted(DATASETS)}",
            self.dataset,
        )
        _check(self.method in METHODS, "method", f"one of {list(METHODS)}", self.method)
        _check(
            isinstance(self.seeds, (list, tuple))
            and len(self.seeds) > 0
            and all(_is_int(s) for s in self.seeds),
            "seeds",
            "a non-empty list of integers",
            self.seeds,
        )
        self.seeds = list(self.seeds)
        _check_int(self.num_workers, "num_workers", 0)
        _check(
            isinstance(self.output_dir, str) and bool(self.output_dir),
            "output_dir",
            "a non-empty path",
            self.output_dir,
        )
        self.train.validate()
        if self.train.fixed_target is not None:
            num_classes = get_dataset_spec(self.dataset).num_classes
            _check(
                self.train.fixed_target < num_classes,
                "train.fixed_target",
                f"< {num_classes}",
                self.train.fixed_target,
            )
        self.evaluation.validate()
        self.defenses.validate()
        self.sweep.validate()
        self.transfer.validate()
        self.logging.validate()
        return self

    @property
    def arch(self) -> str:
        return self.train.arch or default_arch(self.dataset)

    def resolved_dataset_root(self) -> Path:
        """``dataset_root``, else ``$MARKSMAN_DATA_ROOT``, else ``./data``."""
        root = self.dataset_root or os.environ.get(DATA_ROOT_ENV) or "data"
        return Path(root).expanduser()

    def with_seed(self, seed: int) -> TrainConfig:
        """The training section bound to one seed of the seed list."""
        return self.train.replace(seed=seed)


def default_arch(dataset: str) -> str:
    return "mnist_cnn" if get_dataset_spec(dataset).name == "mnist" else "small_resnet"


def get_default_config(dataset: str = "mnist") -> Dict[str, Any]:
    """Default configuration for a dataset, following the published training recipe."""
    spec = get_dataset_spec(dataset)
    if spec.name == "mnist":
        milestones, epochs = [10, 20, 30, 40], 50
    else:
        milestones, epochs = [100, 200, 300, 400], 500

    config = ExperimentConfig(dataset=spec.name).to_dict()
    config["train"].update(
        {
            "arch": default_arch(spec.name),
            "batch_size": 128,
            "classifier_lr": 0.01,
            "lr_milestones": milestones,
            "lr_decay": 0.1,
            "epochs": epochs,
        }
    )
    return config


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any):
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def parse_override(item: str) -> Dict[str, Any]:
    """``section.key=value`` to a nested mapping; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigurationError(f"Override '{item}' must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override '{item}' has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigurationError(
            f"Cannot parse value of override '{item}': {e}", key=key
        ) from e
    data: Dict[str, Any] = {}
    _set_dotted(data, key, value)
    return data


def config_from_dict(
    data: Dict[str, Any], dataset: Optional[str] = None
) -> ExperimentConfig:
    """Merge ``data`` over the dataset defaults and validate."""
    name = data.get("dataset") or dataset
    if name is None:
        raise ConfigurationError(
            "No dataset given in configuration or arguments", key="dataset"
        )
    if not isinstance(name, str):
        raise ConfigurationError(
            f"dataset must be a string, got {name!r}", key="dataset"
        )
    merged = deep_merge(get_default_config(name), data)
    merged["dataset"] = get_dataset_spec(name).name
    return ExperimentConfig.from_dict(merged).validate()


def parse_config(
    path: Optional[Union[str, Path]] = None,
    dataset: Optional[str] = None,
    overrides: Sequence[str] = (),
) -> ExperimentConfig:
    """Load, default-fill and validate an experiment configuration.

    Args:
        path: YAML file; None means defaults only
        dataset: Dataset used when the file does not name one
        overrides: ``section.key=value`` strings applied after the file

    Raises:
        ConfigurationError: Unknown key or out-of-range value (message names both)
    """
    data = load_yaml(path) if path is not None else {}
    for item in overrides:
        data = deep_merge(data, parse_override(item))
    return config_from_dict(data, dataset=dataset)


def to_yaml(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_yaml(config), encoding="utf-8")
    return path


def config_hash(config: ExperimentConfig) -> str:
    """Hash of the result-affecting fields, insensitive to key order and formatting."""
    data = config.to_dict()
    for key in NON_SEMANTIC_KEYS:
        data.pop(key, None)
    return canonical_hash(data)
