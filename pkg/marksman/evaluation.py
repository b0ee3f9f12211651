"""Attack metrics, poisoning-rate and hyperparameter sweeps, trigger transfer."""

import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from .config import TrainConfig
from .datasets import LabeledImageSet, iterate_batches
from .exceptions import InputError, TrainingError
from .models import AttackMetrics, SeedSummary
from .networks import ClassifierNet, evaluating
from .trainer import (
    marksman_train,
    train_benign,
    train_patchmt,
    train_with_frozen_generator,
)
from .triggers import (
    ConditionalTriggerGenerator,
    PatchTriggerTable,
    Trigger,
    poison_batch,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "dataset",
    "method",
    "rate",
    "alpha",
    "beta",
    "seed",
    "clean",
    "asr",
    "n_trials",
]

# Label given to samples whose logits contain NaN; it matches no class.
NO_PREDICTION = -1


def module_device(module: nn.Module) -> torch.device:
    try:
        return next(module.parameters()).device
    except StopIteration:
        return torch.device("cpu")


def predict_labels(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over classes with ties resolved to the lowest class index.

    Rows containing NaN get ``NO_PREDICTION`` and so count as misclassified.
    """
    is_max = logits == logits.max(dim=1, keepdim=True).values
    index = torch.arange(logits.shape[1], device=logits.device).expand_as(logits)
    sentinel = torch.full_like(index, logits.shape[1])
    labels = torch.where(is_max, index, sentinel).min(dim=1).values
    return labels.masked_fill(torch.isnan(logits).any(dim=1), NO_PREDICTION)


def trigger_modules(trigger: Optional[Trigger]) -> List[nn.Module]:
    return [trigger] if isinstance(trigger, nn.Module) else []


def clean_accuracy(
    classifier: ClassifierNet, testset: LabeledImageSet, batch_size: int = 256
) -> float:
    """Fraction of test samples whose prediction equals the label.

    Raises:
        InputError: Empty test set
    """
    if len(testset) == 0:
        raise InputError("Cannot evaluate on an empty test set")
    device = module_device(classifier)
    correct = 0
    with torch.no_grad(), evaluating(classifier):
        for images, labels in iterate_batches(testset, batch_size):
            preds = predict_labels(classifier(images.to(device)))
            correct += int((preds == labels.to(device)).sum())
    return correct / len(testset)


def all_target_asr(
    classifier: ClassifierNet,
    trigger: Trigger,
    testset: LabeledImageSet,
    batch_size: int = 256,
) -> AttackMetrics:
    """Attack success over every (sample, target != label) pair of the test set.

    A trial succeeds when the poisoned sample is classified as its target.
    Works with a conditional generator or a patch table; neither model is
    modified.

    Raises:
        InputError: Empty test set
    """
    if len(testset) == 0:
        raise InputError("Cannot evaluate on an empty test set")
    num_classes = testset.num_classes
    device = module_device(classifier)
    successes = torch.zeros(num_classes, dtype=torch.long)
    trials = torch.zeros(num_classes, dtype=torch.long)
    correct = 0

    with torch.no_grad(), evaluating(classifier, *trigger_modules(trigger)):
        for images, labels in iterate_batches(testset, batch_size):
            images, labels = images.to(device), labels.to(device)
            correct += int((predict_labels(classifier(images)) == labels).sum())
            for offset in range(1, num_classes):
                targets = (labels + offset) % num_classes
                poisoned = poison_batch(trigger, targets, images)
                hit = predict_labels(classifier(poisoned)) == targets
                trials += torch.bincount(targets.cpu(), minlength=num_classes)
                successes += torch.bincount(targets[hit].cpu(), minlength=num_classes)

    n_trials = int(trials.sum())
    per_class = [
        float(s) / float(t) if t > 0 else 0.0
        for s, t in zip(successes.tolist(), trials.tolist())
    ]
    return AttackMetrics(
        clean_accuracy=correct / len(testset),
        asr=float(successes.sum()) / n_trials,
        per_class_asr=per_class,
        per_class_trials=[int(t) for t in trials.tolist()],
        n_trials=n_trials,
    )


def per_class_asr(
    classifier: ClassifierNet,
    trigger: Trigger,
    testset: LabeledImageSet,
    batch_size: int = 256,
) -> List[float]:
    """Attack success rate for each target class."""
    return all_target_asr(classifier, trigger, testset, batch_size).per_class_asr


def _train_and_score(
    method: str,
    trainset: LabeledImageSet,
    testset: LabeledImageSet,
    config: TrainConfig,
    device: Optional[Union[str, torch.device]],
    batch_size: int,
) -> Dict[str, Any]:
    if method == "marksman":
        classifier, trigger, _ = marksman_train(trainset, config, device=device)
    elif method == "patchmt":
        classifier, trigger, _ = train_patchmt(trainset, config, device=device)
    else:
        classifier, _ = train_benign(trainset, config, device=device)
        clean = clean_accuracy(classifier, testset, batch_size)
        return {"clean": clean, "asr": float("nan"), "n_trials": 0}
    metrics = all_target_asr(classifier, trigger, testset, batch_size)
    return {
        "clean": metrics.clean_accuracy,
        "asr": metrics.asr,
        "n_trials": metrics.n_trials,
    }


def poison_rate_sweep(
    base_config: TrainConfig,
    rates: Sequence[float],
    trainset: LabeledImageSet,
    testset: LabeledImageSet,
    method: str = "marksman",
    device: Optional[Union[str, torch.device]] = None,
    batch_size: int = 256,
) -> pd.DataFrame:
    """Train one model per poisoning rate from scratch and tabulate its metrics.

    Raises:
        TrainingError: A run diverged; the message names the rate
    """
    rows = []
    for rate in rates:
        config = base_config.replace(poison_rate=float(rate))
        logger.info(f"Sweep point: {method} poison_rate={rate}")
        try:
            scores = _train_and_score(
                method, trainset, testset, config, device, batch_size
            )
        except TrainingError as e:
            raise TrainingError(
                f"poison_rate={rate}: {e}", iteration=e.iteration
            ) from e
        rows.append(
            {
                "dataset": trainset.name,
                "method": method,
                "rate": float(rate),
                "alpha": config.alpha,
                "beta": config.beta,
                "seed": config.seed,
                **scores,
            }
        )
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def hyperparameter_sweep(
    base_config: TrainConfig,
    alphas: Sequence[float],
    betas: Sequence[float],
    trainset: LabeledImageSet,
    testset: LabeledImageSet,
    fixed_alpha: Optional[float] = None,
    fixed_beta: Optional[float] = None,
    device: Optional[Union[str, torch.device]] = None,
    batch_size: int = 256,
) -> pd.DataFrame:
    """Vary alpha with beta fixed, then beta with alpha fixed.

    Returns:
        One row per run with a ``varied`` column naming the swept parameter
    """
    fixed_alpha = base_config.alpha if fixed_alpha is None else fixed_alpha
    fixed_beta = base_config.beta if fixed_beta is None else fixed_beta
    grid = [("alpha", float(a), fixed_beta) for a in alphas]
    grid += [("beta", fixed_alpha, float(b)) for b in betas]

    rows = []
    for varied, alpha, beta in grid:
        config = base_config.replace(alpha=alpha, beta=beta)
        logger.info(f"Sweep point: alpha={alpha} beta={beta}")
        try:
            scores = _train_and_score(
                "marksman", trainset, testset, config, device, batch_size
            )
        except TrainingError as e:
            raise TrainingError(
                f"alpha={alpha}, beta={beta}: {e}", iteration=e.iteration
            ) from e
        rows.append(
            {
                "dataset": trainset.name,
                "method": "marksman",
                "rate": config.poison_rate,
                "alpha": alpha,
                "beta": beta,
                "seed": config.seed,
                "varied": varied,
                **scores,
            }
        )
    return pd.DataFrame(rows, columns=METRIC_COLUMNS + ["varied"])


def transfer_attack(
    frozen_generator: ConditionalTriggerGenerator,
    new_arch_id: str,
    trainset: LabeledImageSet,
    testset: LabeledImageSet,
    config: TrainConfig,
    seed: Optional[int] = None,
    device: Optional[Union[str, torch.device]] = None,
    batch_size: int = 256,
) -> AttackMetrics:
    """Poison a fresh ``new_arch_id`` classifier with a generator that stays frozen."""
    changes: Dict[str, Any] = {"arch": new_arch_id}
    if seed is not None:
        changes["seed"] = seed
    config = config.replace(**changes)
    frozen_generator.eval()
    classifier, _ = train_with_frozen_generator(
        trainset, frozen_generator, config, device=device
    )
    metrics = all_target_asr(classifier, frozen_generator, testset, batch_size)
    logger.info(
        f"Transfer to {new_arch_id} (seed {config.seed}): "
        f"clean {metrics.clean_accuracy:.4f}, asr {metrics.asr:.4f}"
    )
    return metrics


def summarize_seeds(
    rows: Union[pd.DataFrame, Iterable[Dict[str, Any]]],
    metrics: Sequence[str] = ("clean", "asr"),
) -> Dict[str, SeedSummary]:
    """Mean, std and 95% interval per metric across seed rows, ignoring NaN."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    summaries = {}
    for metric in metrics:
        if metric not in frame:
            continue
        values = frame[metric].astype(float).to_numpy()
        values = values[~np.isnan(values)]
        if len(values):
            summaries[metric] = SeedSummary.from_values(metric, values.tolist())
    return summaries
