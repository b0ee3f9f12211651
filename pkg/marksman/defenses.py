"""Backdoor defenses used to measure how detectable a poisoned model is.

Each defense works on its own copy or under ``torch.no_grad``; the model
under test is never modified.
"""

import copy
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from .config import DefenseOptions, NeuralCleanseOptions
from .datasets import LabeledImageSet, iterate_batches
from .evaluation import (
    all_target_asr,
    clean_accuracy,
    module_device,
    predict_labels,
    trigger_modules,
)
from .exceptions import ConfigurationError, InputError
from .models import (
    DefenseReport,
    NeuralCleanseResult,
    PruningPoint,
    SpectralResult,
    StripResult,
)
from .networks import ClassifierNet, evaluating, penultimate_features
from .triggers import Trigger, poison_batch, sample_targets
from .utils import make_generator

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


# Neural Cleanse


@dataclass
class ReversedTrigger:
    """Smallest mask/pattern found that flips clean samples to ``target``."""

    target: int
    mask: torch.Tensor
    pattern: torch.Tensor
    l1_norm: float
    attack_success: float
    converged: bool


def anomaly_index(norms: Sequence[float]) -> float:
    """MAD-based outlier score of the smallest norm.

    Returns 0 when the median absolute deviation is 0.
    """
    values = np.asarray(norms, dtype=np.float64)
    if values.size == 0:
        raise InputError("No norms to score")
    median = np.median(values)
    mad = MAD_CONSISTENCY * np.median(np.abs(values - median))
    if mad == 0:
        return 0.0
    return float(abs(values.min() - median) / mad)


def reverse_engineer_trigger(
    classifier: ClassifierNet,
    clean_samples: LabeledImageSet,
    target: int,
    options: NeuralCleanseOptions,
    generator: Optional[torch.Generator] = None,
) -> ReversedTrigger:
    """Optimise a sigmoid-parameterised mask and pattern that send inputs to ``target``.

    The sparsity weight starts at ``options.init_cost`` and is raised or
    lowered after ``options.patience`` epochs above or below the attack
    threshold. The smallest successful mask is kept.
    """
    device = module_device(classifier)
    channels, height, width = clean_samples.image_shape
    mask_param = torch.rand(1, height, width, generator=generator) * 2 - 1
    pattern_param = torch.rand(channels, height, width, generator=generator) * 2 - 1
    mask_param, pattern_param = mask_param.to(device), pattern_param.to(device)
    mask_param.requires_grad_(True)
    pattern_param.requires_grad_(True)
    optimizer = torch.optim.Adam(
        [mask_param, pattern_param], lr=options.lr, betas=(0.5, 0.9)
    )

    cost = options.init_cost
    up, down = 0, 0
    best: Optional[Tuple[torch.Tensor, torch.Tensor, float, float]] = None
    success = 0.0
    with evaluating(classifier):
        for _ in range(options.epochs):
            hits, count = 0, 0
            for images, _labels in iterate_batches(clean_samples, options.batch_size):
                images = images.to(device)
                mask = torch.sigmoid(mask_param)
                pattern = torch.sigmoid(pattern_param)
                stamped = (1 - mask) * images + mask * pattern
                logits = classifier(stamped)
                targets = torch.full(
                    (images.shape[0],), target, dtype=torch.long, device=device
                )
                loss = F.cross_entropy(logits, targets) + cost * mask.abs().sum()
                optimizer.zero_grad(set_to_none=True)
                loss.backward(inputs=[mask_param, pattern_param])
                optimizer.step()
                hits += int((predict_labels(logits.detach()) == target).sum())
                count += images.shape[0]

            success = hits / max(count, 1)
            with torch.no_grad():
                norm = float(torch.sigmoid(mask_param).sum())
            if success >= options.attack_threshold and (best is None or norm < best[2]):
                best = (
                    torch.sigmoid(mask_param).detach().cpu(),
                    torch.sigmoid(pattern_param).detach().cpu(),
                    norm,
                    success,
                )

            if cost == 0 and success >= options.attack_threshold:
                cost = options.init_cost
                up, down = 0, 0
            elif success >= options.attack_threshold:
                up, down = up + 1, 0
            else:
                up, down = 0, down + 1
            if up >= options.patience:
                cost *= options.cost_multiplier
                up = 0
            elif down >= options.patience:
                cost /= options.cost_multiplier**1.5
                down = 0

    if best is None:
        logger.warning(
            f"Neural Cleanse did not reach the attack threshold for class {target}"
        )
        with torch.no_grad():
            mask = torch.sigmoid(mask_param).detach().cpu()
            pattern = torch.sigmoid(pattern_param).detach().cpu()
        return ReversedTrigger(target, mask, pattern, float(mask.sum()), success, False)
    mask, pattern, norm, best_success = best
    return ReversedTrigger(target, mask, pattern, norm, best_success, True)


def neural_cleanse(
    classifier: ClassifierNet,
    clean_samples: LabeledImageSet,
    options: Optional[NeuralCleanseOptions] = None,
    seed: int = 0,
) -> Tuple[NeuralCleanseResult, List[ReversedTrigger]]:
    """Reverse-engineer one trigger per class and score the mask norms.

    Returns:
        (result with anomaly index and per-class L1 norms, reversed triggers)
    """
    options = options or NeuralCleanseOptions()
    if len(clean_samples) == 0:
        raise InputError("Neural Cleanse needs clean samples")
    generator = make_generator(seed)
    triggers = []
    for target in range(clean_samples.num_classes):
        found = reverse_engineer_trigger(
            classifier, clean_samples, target, options, generator
        )
        triggers.append(found)
        logger.debug(f"Class {target}: mask L1 {triggers[-1].l1_norm:.2f}")

    norms = [t.l1_norm for t in triggers]
    index = anomaly_index(norms)
    flagged = int(np.argmin(norms)) if index > ANOMALY_THRESHOLD else None
    logger.info(f"Neural Cleanse anomaly index {index:.3f}")
    result = NeuralCleanseResult(
        anomaly_index=index,
        norms=norms,
        converged=[t.converged for t in triggers],
        flagged_class=flagged,
        threshold=ANOMALY_THRESHOLD,
    )
    return result, triggers


# STRIP


def strip_entropy(
    classifier: ClassifierNet,
    query_images: torch.Tensor,
    overlay_images: torch.Tensor,
    n_perturb: int = 100,
    blend: float = 0.5,
    generator: Optional[torch.Generator] = None,
    chunk_size: int = 4096,
) -> torch.Tensor:
    """Mean prediction entropy (natural log) of each query blended with random overlays.

    Raises:
        InputError: Empty overlay set
        ConfigurationError: ``n_perturb`` < 1
    """
    if overlay_images.shape[0] == 0:
        raise InputError("STRIP needs a non-empty overlay set")
    if n_perturb < 1:
        raise ConfigurationError(
            f"n_perturb must be >= 1, got {n_perturb}", key="n_perturb"
        )
    device = module_device(classifier)
    n_queries = query_images.shape[0]
    picks = torch.randint(
        0, overlay_images.shape[0], (n_queries, n_perturb), generator=generator
    )

    entropies = []
    per_chunk = max(1, chunk_size // n_perturb)
    with torch.no_grad(), evaluating(classifier):
        for start in range(0, n_queries, per_chunk):
            stop = start + per_chunk
            queries = query_images[start:stop].to(device)
            queries = queries.repeat_interleave(n_perturb, dim=0)
            overlays = overlay_images[picks[start:stop].reshape(-1)].to(device)
            blended = blend * queries + (1 - blend) * overlays
            probs = F.softmax(classifier(blended).double(), dim=1)
            entropy = torch.special.entr(probs).sum(dim=1).clamp_min(0.0)
            entropies.append(entropy.reshape(-1, n_perturb).mean(dim=1).cpu())
    if not entropies:
        return torch.zeros(0, dtype=torch.float64)
    return torch.cat(entropies)


def strip_auroc(
    clean_entropies: Sequence[float], backdoor_entropies: Sequence[float]
) -> float:
    """AUROC of a detector flagging low-entropy inputs as backdoored."""
    clean = np.asarray(clean_entropies, dtype=np.float64)
    backdoor = np.asarray(backdoor_entropies, dtype=np.float64)
    if clean.size == 0 or backdoor.size == 0:
        raise InputError("AUROC needs clean and backdoor entropies")
    labels = np.concatenate([np.zeros(clean.size), np.ones(backdoor.size)])
    scores = -np.concatenate([clean, backdoor])
    return float(roc_auc_score(labels, scores))


# Spectral signature


def _features(
    classifier: ClassifierNet, images: torch.Tensor, batch_size: int
) -> torch.Tensor:
    device = module_device(classifier)
    chunks = []
    with torch.no_grad(), evaluating(classifier):
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start : start + batch_size].to(device)
            chunks.append(penultimate_features(classifier, chunk).double().cpu())
    if not chunks:
        return torch.zeros(0, classifier.feature_dim, dtype=torch.float64)
    return torch.cat(chunks)


def spectral_scores(
    clean_features: torch.Tensor, features: torch.Tensor
) -> torch.Tensor:
    """Squared projection of ``features`` on the top singular direction of clean data.

    The direction is the top right singular vector of the centred clean features.

    All scores are 0 when the clean features have no variance.
    """
    if clean_features.dim() != 2 or clean_features.shape[1] == 0:
        raise InputError("Spectral signature needs features of dimension >= 1")
    mean = clean_features.mean(dim=0)
    centred = clean_features - mean
    if not bool(torch.any(centred != 0)):
        return torch.zeros(features.shape[0], dtype=features.dtype)
    _, _, vh = torch.linalg.svd(centred, full_matrices=False)
    return ((features - mean) @ vh[0]) ** 2


def spectral_signature(
    classifier: ClassifierNet,
    clean_samples: LabeledImageSet,
    backdoor_images: torch.Tensor,
    backdoor_targets: Optional[torch.Tensor] = None,
    per_class: bool = False,
    bins: int = 50,
    batch_size: int = 256,
) -> SpectralResult:
    """Score clean and backdoor samples by their spectral-signature outlier value.

    With ``per_class`` the score is computed inside groups sharing a label
    (true label of clean samples, target of backdoor samples).

    Raises:
        InputError: Empty sample set or zero feature dimension
    """
    if len(clean_samples) == 0 or backdoor_images.shape[0] == 0:
        raise InputError("Spectral signature needs clean and backdoor samples")
    if classifier.feature_dim == 0:
        raise InputError("Classifier has zero-dimensional features")
    clean = _features(classifier, clean_samples.images, batch_size)
    backdoor = _features(classifier, backdoor_images, batch_size)

    if not per_class:
        scores = torch.cat(
            [spectral_scores(clean, clean), spectral_scores(clean, backdoor)]
        )
    else:
        if backdoor_targets is None:
            raise InputError("Per-class spectral scoring needs backdoor targets")
        clean_scores = torch.zeros(clean.shape[0], dtype=torch.float64)
        backdoor_scores = torch.zeros(backdoor.shape[0], dtype=torch.float64)
        clean_labels = clean_samples.labels.cpu()
        backdoor_targets = backdoor_targets.cpu()
        for label in range(clean_samples.num_classes):
            in_clean = clean_labels == label
            in_backdoor = backdoor_targets == label
            reference = clean[in_clean] if bool(in_clean.any()) else clean
            if bool(in_clean.any()):
                clean_scores[in_clean] = spectral_scores(reference, clean[in_clean])
            if bool(in_backdoor.any()):
                backdoor_scores[in_backdoor] = spectral_scores(
                    reference, backdoor[in_backdoor]
                )
        scores = torch.cat([clean_scores, backdoor_scores])

    values = scores.numpy()
    edges = np.histogram_bin_edges(values, bins=bins) if values.size else np.array([])
    return SpectralResult(
        scores=values.tolist(),
        is_backdoor=[False] * clean.shape[0] + [True] * backdoor.shape[0],
        bin_edges=edges.tolist(),
    )


# Fine-pruning


def channel_activations(
    classifier: ClassifierNet, clean_samples: LabeledImageSet, batch_size: int = 256
) -> torch.Tensor:
    """Mean activation of each channel of the last convolutional activation map."""
    device = module_device(classifier)
    totals: List[torch.Tensor] = []

    def hook(_module, _inputs, output):
        totals.append(output.detach().double().sum(dim=(0, 2, 3)).cpu())

    handle = classifier.last_conv_activation.register_forward_hook(hook)
    try:
        with torch.no_grad(), evaluating(classifier):
            for images, _ in iterate_batches(clean_samples, batch_size):
                classifier(images.to(device))
    finally:
        handle.remove()
    if not totals:
        raise InputError("Fine-pruning needs clean samples")
    return torch.stack(totals).sum(dim=0) / len(clean_samples)


class _ChannelMask:
    def __init__(self, keep: torch.Tensor):
        self.keep = keep

    def __call__(self, _module, _inputs, output):
        return output * self.keep.to(output.device, output.dtype)[None, :, None, None]


def prune_channels(classifier: ClassifierNet, channels: Sequence[int]) -> ClassifierNet:
    """Deep copy of ``classifier`` whose listed last-conv channels always output 0."""
    pruned = copy.deepcopy(classifier)
    num_channels = None

    def probe(_module, _inputs, output):
        nonlocal num_channels
        num_channels = output.shape[1]

    # channel count is only known from an activation
    handle = pruned.last_conv_activation.register_forward_hook(probe)
    with torch.no_grad(), evaluating(pruned):
        pruned(torch.zeros(1, *pruned.input_shape, device=module_device(pruned)))
    handle.remove()

    keep = torch.ones(int(num_channels))  # type: ignore[arg-type]
    if len(channels):
        keep[torch.as_tensor(list(channels), dtype=torch.long)] = 0.0
    pruned.last_conv_activation.register_forward_hook(_ChannelMask(keep))
    return pruned


def fine_pruning(
    classifier: ClassifierNet,
    clean_samples: LabeledImageSet,
    trigger: Optional[Trigger],
    testset: LabeledImageSet,
    ratios: Sequence[float],
    batch_size: int = 256,
) -> List[PruningPoint]:
    """Clean accuracy and ASR after pruning the least active channels at each ratio.

    Raises:
        ConfigurationError: A ratio outside [0, 1], unsorted ratios or a first
            ratio other than 0
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ConfigurationError("No pruning ratios given", key="ratios")
    if any(r < 0 or r > 1 for r in ratios):
        raise ConfigurationError(
            f"Pruning ratios must lie in [0, 1], got {ratios}", key="ratios"
        )
    if ratios != sorted(ratios) or ratios[0] != 0:
        raise ConfigurationError(
            f"Pruning ratios must ascend from 0, got {ratios}", key="ratios"
        )

    activations = channel_activations(classifier, clean_samples, batch_size)
    order = np.argsort(activations.numpy(), kind="stable")
    num_channels = len(order)

    curve = []
    for ratio in ratios:
        count = int(math.floor(ratio * num_channels + 1e-9))
        pruned = prune_channels(classifier, order[:count].tolist())
        if trigger is not None:
            metrics = all_target_asr(pruned, trigger, testset, batch_size)
            clean, asr = metrics.clean_accuracy, metrics.asr
        else:
            clean, asr = clean_accuracy(pruned, testset, batch_size), float("nan")
        curve.append(
            PruningPoint(
                ratio=ratio, pruned_channels=count, clean_accuracy=clean, asr=asr
            )
        )
        logger.info(
            f"Pruned {count}/{num_channels} channels: "
            f"clean {clean:.4f}, asr {asr:.4f}"
        )
    return curve


# Suite


def make_backdoor_samples(
    trigger: Trigger, testset: LabeledImageSet, count: int, seed: int = 0
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Poison the first ``count`` test samples with uniformly drawn targets c != y."""
    subset = testset.head(count)
    targets = sample_targets(
        subset.labels, testset.num_classes, generator=make_generator(seed)
    )
    device = torch.device("cpu")
    if isinstance(trigger, torch.nn.Module):
        device = next(trigger.parameters()).device
    with torch.no_grad(), evaluating(*trigger_modules(trigger)):
        images = poison_batch(trigger, targets.to(device), subset.images.to(device))
        images = images.cpu()
    return images, targets


def run_defense_suite(
    classifier: ClassifierNet,
    trigger: Optional[Trigger],
    clean_pool: LabeledImageSet,
    testset: LabeledImageSet,
    options: Optional[DefenseOptions] = None,
    seed: int = 0,
    batch_size: int = 256,
) -> DefenseReport:
    """Run all four defenses and collect their outputs.

    Without a trigger (benign models) STRIP and the spectral signature are
    skipped and the pruning curve records clean accuracy only.
    """
    options = options or DefenseOptions()
    clean = clean_pool.head(options.clean_samples)
    report = DefenseReport()

    logger.info("Running Neural Cleanse")
    nc, _ = neural_cleanse(classifier, clean, options.neural_cleanse, seed=seed)
    report.neural_cleanse = nc
    if not nc.all_converged:
        missing = [i for i, ok in enumerate(nc.converged) if not ok]
        report.warnings.append(
            f"neural_cleanse: classes {missing} did not reach the attack threshold"
        )

    if trigger is not None:
        backdoor_images, backdoor_targets = make_backdoor_samples(
            trigger, testset, options.backdoor_samples, seed=seed
        )
        logger.info("Running STRIP")
        queries = options.strip.queries
        strip_rng = make_generator(seed + 1)
        clean_entropy = strip_entropy(
            classifier,
            testset.images[-queries:],
            clean.images,
            options.strip.n_perturb,
            options.strip.blend,
            generator=strip_rng,
        )
        backdoor_entropy = strip_entropy(
            classifier,
            backdoor_images[:queries],
            clean.images,
            options.strip.n_perturb,
            options.strip.blend,
            generator=strip_rng,
        )
        report.strip = StripResult(
            clean_entropies=clean_entropy.tolist(),
            backdoor_entropies=backdoor_entropy.tolist(),
            auroc=strip_auroc(clean_entropy.tolist(), backdoor_entropy.tolist()),
        )

        logger.info("Running spectral signature")
        report.spectral = spectral_signature(
            classifier,
            clean,
            backdoor_images,
            backdoor_targets,
            per_class=options.spectral.per_class,
            bins=options.spectral.bins,
            batch_size=batch_size,
        )
    else:
        report.warnings.append("strip, spectral: skipped, model has no trigger")

    logger.info("Running fine-pruning")
    report.pruning_curve = fine_pruning(
        classifier, clean, trigger, testset, options.fine_pruning.ratios, batch_size
    )
    return report
