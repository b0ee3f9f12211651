"""Data models for training histories, attack metrics, defense reports and manifests."""

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import InputError
from .utils import atomic_write_text, file_checksum

# z-value of a two-sided 95% normal-approximation interval
Z_95 = 1.959963984540054


@dataclass
class IterationRecord:
    """Losses of one optimisation step."""

    iteration: int
    epoch: int
    clean_loss: float
    backdoor_loss: float
    trigger_loss: float


@dataclass
class EpochRecord:
    """End-of-epoch summary, including probe-set metrics when available."""

    epoch: int
    iteration: int
    classifier_lr: float
    clean_loss: float
    backdoor_loss: float
    trigger_loss: float
    clean_accuracy: Optional[float] = None
    asr: Optional[float] = None
    pattern_norm: Optional[float] = None


@dataclass
class TrainHistory:
    """Per-iteration losses and per-epoch metrics of a training run."""

    iterations: List[IterationRecord] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)
    initial_pattern_norm: Optional[float] = None

    ITERATION_COLUMNS = (
        "iteration",
        "epoch",
        "clean_loss",
        "backdoor_loss",
        "trigger_loss",
    )

    def record_iteration(self, record: IterationRecord):
        self.iterations.append(record)

    def record_epoch(self, record: EpochRecord):
        self.epochs.append(record)

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)

    @property
    def last_epoch(self) -> Optional[EpochRecord]:
        return self.epochs[-1] if self.epochs else None

    def all_finite(self) -> bool:
        return all(
            math.isfinite(r.clean_loss)
            and math.isfinite(r.backdoor_loss)
            and math.isfinite(r.trigger_loss)
            for r in self.iterations
        )

    def iterations_frame(self) -> pd.DataFrame:
        if not self.iterations:
            return pd.DataFrame(columns=list(self.ITERATION_COLUMNS))
        return pd.DataFrame(
            [asdict(r) for r in self.iterations], columns=list(self.ITERATION_COLUMNS)
        )

    def write_csv(self, path: Union[str, Path]) -> Path:
        """Iteration losses as CSV, one row per iteration in ``ITERATION_COLUMNS``."""
        path = Path(path)
        frame = self.iterations_frame()
        atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
        return path

    def write_epochs_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        lines = [json.dumps(asdict(r)) for r in self.epochs]
        atomic_write_text(path, "".join(line + "\n" for line in lines))
        return path

    @classmethod
    def read(
        cls,
        csv_path: Union[str, Path],
        jsonl_path: Optional[Union[str, Path]] = None,
    ) -> "TrainHistory":
        """Rebuild a history from its CSV and (optionally) JSON-lines files."""
        frame = pd.read_csv(csv_path, float_precision="round_trip")
        iterations = [
            IterationRecord(
                iteration=int(row.iteration),
                epoch=int(row.epoch),
                clean_loss=float(row.clean_loss),
                backdoor_loss=float(row.backdoor_loss),
                trigger_loss=float(row.trigger_loss),
            )
            for row in frame.itertuples(index=False)
        ]
        epochs = []
        if jsonl_path is not None and Path(jsonl_path).exists():
            with open(jsonl_path, "r", encoding="utf-8") as f:
                epochs = [EpochRecord(**json.loads(line)) for line in f if line.strip()]
        return cls(iterations=iterations, epochs=epochs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": [asdict(r) for r in self.iterations],
            "epochs": [asdict(r) for r in self.epochs],
            "initial_pattern_norm": self.initial_pattern_norm,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainHistory":
        return cls(
            iterations=[IterationRecord(**r) for r in data.get("iterations", [])],
            epochs=[EpochRecord(**r) for r in data.get("epochs", [])],
            initial_pattern_norm=data.get("initial_pattern_norm"),
        )


@dataclass
class AttackMetrics:
    """Clean accuracy and all-target attack success of one model.

    ``per_class_asr[c]`` is the success rate over the ``per_class_trials[c]``
    trials that targeted class ``c``; ``asr`` is their trial-weighted mean.
    """

    clean_accuracy: float
    asr: float
    per_class_asr: List[float]
    per_class_trials: List[int]
    n_trials: int

    def __post_init__(self):
        fractions = [self.clean_accuracy, self.asr, *self.per_class_asr]
        if any(not (0.0 <= f <= 1.0) for f in fractions):
            raise InputError(f"Metric fractions must lie in [0, 1]: {fractions}")
        if len(self.per_class_asr) != len(self.per_class_trials):
            raise InputError("per_class_asr and per_class_trials differ in length")
        if sum(self.per_class_trials) != self.n_trials:
            raise InputError(
                f"Per-class trials sum to {sum(self.per_class_trials)}, "
                f"expected {self.n_trials}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.per_class_asr)

    def to_row(self, **context: Any) -> Dict[str, Any]:
        """Flat row for metric CSVs; ``context`` holds dataset, method, seed, ..."""
        row = dict(context)
        row.update(
            {"clean": self.clean_accuracy, "asr": self.asr, "n_trials": self.n_trials}
        )
        return row

    def per_class_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "target": list(range(self.num_classes)),
                "asr": self.per_class_asr,
                "trials": self.per_class_trials,
            }
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackMetrics":
        return cls(**data)


@dataclass
class SeedSummary:
    """Mean, sample standard deviation and 95% CI of one metric across seeds."""

    metric: str
    n: int
    mean: float
    std: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_values(cls, metric: str, values: Sequence[float]) -> "SeedSummary":
        if len(values) == 0:
            raise InputError(f"No values to summarise for {metric}")
        arr = np.asarray(values, dtype=np.float64)
        mean = float(arr.mean())
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        half = Z_95 * std / math.sqrt(len(arr))
        return cls(
            metric=metric,
            n=len(arr),
            mean=mean,
            std=std,
            ci_low=mean - half,
            ci_high=mean + half,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class NeuralCleanseResult:
    """Per-class reversed-trigger mask norms and their anomaly index."""

    anomaly_index: float
    norms: List[float]
    converged: List[bool]
    flagged_class: Optional[int] = None
    threshold: float = 2.0

    @property
    def is_flagged(self) -> bool:
        return self.anomaly_index > self.threshold

    @property
    def all_converged(self) -> bool:
        return all(self.converged)


@dataclass
class StripResult:
    """Mean perturbation entropies of clean and backdoor queries."""

    clean_entropies: List[float]
    backdoor_entropies: List[float]
    auroc: float


@dataclass
class SpectralResult:
    """Outlier scores with a backdoor tag per sample."""

    scores: List[float]
    is_backdoor: List[bool]
    bin_edges: List[float] = field(default_factory=list)


@dataclass
class PruningPoint:
    ratio: float
    pruned_channels: int
    clean_accuracy: float
    asr: float


@dataclass
class DefenseReport:
    """Outputs of the defense suite; sections are None when a defense did not run."""

    neural_cleanse: Optional[NeuralCleanseResult] = None
    strip: Optional[StripResult] = None
    spectral: Optional[SpectralResult] = None
    pruning_curve: List[PruningPoint] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.pruning_curve and self.pruning_curve[0].ratio != 0:
            raise InputError("Pruning curve must start at ratio 0")
        if self.strip is not None and any(
            e < 0 for e in self.strip.clean_entropies + self.strip.backdoor_entropies
        ):
            raise InputError("Entropies must be non-negative")
        if self.neural_cleanse is not None and self.neural_cleanse.anomaly_index < 0:
            raise InputError("Anomaly index must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "neural_cleanse": (
                asdict(self.neural_cleanse) if self.neural_cleanse else None
            ),
            "strip": asdict(self.strip) if self.strip else None,
            "spectral": asdict(self.spectral) if self.spectral else None,
            "pruning_curve": [asdict(p) for p in self.pruning_curve],
            "warnings": list(self.warnings),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DefenseReport":
        nc = data.get("neural_cleanse")
        strip = data.get("strip")
        spectral = data.get("spectral")
        return cls(
            neural_cleanse=NeuralCleanseResult(**nc) if nc else None,
            strip=StripResult(**strip) if strip else None,
            spectral=SpectralResult(**spectral) if spectral else None,
            pruning_curve=[PruningPoint(**p) for p in data.get("pruning_curve", [])],
            warnings=list(data.get("warnings", [])),
        )

    @classmethod
    def from_json(cls, json_str: str) -> "DefenseReport":
        return cls.from_dict(json.loads(json_str))

    def write(self, directory: Union[str, Path]) -> List[Path]:
        """JSON report plus one plot-ready CSV per section that ran."""
        directory = Path(directory)
        written = [directory / "defense_report.json"]
        atomic_write_text(written[0], self.to_json())

        if self.neural_cleanse is not None:
            frame = pd.DataFrame(
                {
                    "target": list(range(len(self.neural_cleanse.norms))),
                    "mask_l1": self.neural_cleanse.norms,
                    "converged": self.neural_cleanse.converged,
                }
            )
            written.append(_write_frame(frame, directory / "nc_norms.csv"))
        if self.strip is not None:
            frame = pd.DataFrame(
                {
                    "entropy": (
                        self.strip.clean_entropies + self.strip.backdoor_entropies
                    ),
                    "kind": ["clean"] * len(self.strip.clean_entropies)
                    + ["backdoor"] * len(self.strip.backdoor_entropies),
                }
            )
            written.append(_write_frame(frame, directory / "strip_entropies.csv"))
        if self.spectral is not None:
            frame = pd.DataFrame(
                {
                    "score": self.spectral.scores,
                    "kind": [
                        "backdoor" if b else "clean" for b in self.spectral.is_backdoor
                    ],
                }
            )
            written.append(_write_frame(frame, directory / "spectral_scores.csv"))
        if self.pruning_curve:
            frame = pd.DataFrame([asdict(p) for p in self.pruning_curve])
            written.append(_write_frame(frame, directory / "pruning_curve.csv"))
        return written


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
    return path


@dataclass
class FileRecord:
    """A produced file, relative to the manifest directory."""

    path: str
    sha256: str
    size: int

    @classmethod
    def from_path(cls, root: Path, path: Path) -> "FileRecord":
        path = Path(path)
        return cls(
            path=str(path.resolve().relative_to(Path(root).resolve())),
            sha256=file_checksum(path),
            size=path.stat().st_size,
        )


@dataclass
class StageFailure:
    stage: str
    message: str
    run: Optional[str] = None


@dataclass
class RunRecord:
    """One (method, dataset, seed) run directory and its headline metrics."""

    name: str
    method: str
    dataset: str
    seed: int
    status: str = "pending"
    metrics: Optional[Dict[str, Any]] = None
    defense: Optional[Dict[str, Any]] = None


@dataclass
class RunManifest:
    """Index of an experiment directory: config identity, runs, files and failures."""

    config_hash: str
    code_version: str
    started_at: datetime = field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
    config: Dict[str, Any] = field(default_factory=dict)
    runs: List[RunRecord] = field(default_factory=list)
    files: List[FileRecord] = field(default_factory=list)
    failures: List[StageFailure] = field(default_factory=list)
    summaries: Dict[str, SeedSummary] = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return not self.failures

    def get_run(self, name: str) -> Optional[RunRecord]:
        for run in self.runs:
            if run.name == name:
                return run
        return None

    def add_file(self, root: Path, path: Path) -> FileRecord:
        """Record (or refresh) the checksum of a produced file."""
        record = FileRecord.from_path(root, path)
        self.files = [f for f in self.files if f.path != record.path]
        self.files.append(record)
        return record

    def record_failure(self, stage: str, message: str, run: Optional[str] = None):
        self.failures.append(StageFailure(stage=stage, message=message, run=run))

    def verify(self, root: Path) -> List[str]:
        """Paths whose file is missing or whose checksum no longer matches."""
        problems = []
        for record in self.files:
            path = Path(root) / record.path
            if not path.exists() or file_checksum(path) != record.sha256:
                problems.append(record.path)
        return problems

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "started_at": self.started_at.isoformat(),
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
            "config": self.config,
            "runs": [asdict(r) for r in self.runs],
            "files": [asdict(f) for f in self.files],
            "failures": [asdict(f) for f in self.failures],
            "summaries": {k: v.to_dict() for k, v in self.summaries.items()},
            "succeeded": self.succeeded,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, default=str)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        finished = data.get("finished_at")
        return cls(
            config_hash=data["config_hash"],
            code_version=data.get("code_version", "unknown"),
            started_at=datetime.fromisoformat(data["started_at"]),
            finished_at=datetime.fromisoformat(finished) if finished else None,
            config=data.get("config", {}),
            runs=[RunRecord(**r) for r in data.get("runs", [])],
            files=[FileRecord(**f) for f in data.get("files", [])],
            failures=[StageFailure(**f) for f in data.get("failures", [])],
            summaries={
                k: SeedSummary(**v) for k, v in data.get("summaries", {}).items()
            },
        )

    @classmethod
    def from_json(cls, json_str: str) -> "RunManifest":
        return cls.from_dict(json.loads(json_str))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def write(self, path: Union[str, Path]) -> Path:
        """Write-temp-then-rename so readers never see a partial manifest."""
        path = Path(path)
        atomic_write_text(path, self.to_json())
        return path
