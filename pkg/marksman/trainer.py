"""Joint poisoning of a classifier and a class-conditional trigger generator.

The classifier parameters are updated every iteration against a *live* copy
of the generator, while a *shadow* generator is optimised every iteration and
only published to the live copy every ``sync_every`` iterations.
"""

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, cast

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

from .checkpoints import load_training_state, save_training_state
from .config import TrainConfig, default_arch
from .datasets import AugmentPolicy, LabeledImageSet, augment, make_loader
from .exceptions import ConfigurationError, InputError, TrainingError
from .models import EpochRecord, IterationRecord, TrainHistory
from .networks import ClassifierNet, build_classifier, evaluating
from .triggers import (
    ConditionalTriggerGenerator,
    PatchTriggerTable,
    Trigger,
    build_generator,
    build_patch_table,
    expand_all_targets,
    poison_batch,
    sample_targets,
)
from .utils import make_generator, resolve_device

logger = logging.getLogger(__name__)

TRAIN_MODES = ("marksman", "benign", "patchmt", "frozen")


@dataclass
class PoisonSplit:
    """A minibatch split into clean samples S_c and targeted backdoor samples S_p."""

    clean_images: torch.Tensor
    clean_labels: torch.Tensor
    poison_images: torch.Tensor
    poison_labels: torch.Tensor
    targets: torch.Tensor

    @property
    def num_clean(self) -> int:
        return int(self.clean_labels.shape[0])

    @property
    def num_poison(self) -> int:
        return int(self.targets.shape[0])

    def to(self, device: torch.device) -> "PoisonSplit":
        return PoisonSplit(
            clean_images=self.clean_images.to(device),
            clean_labels=self.clean_labels.to(device),
            poison_images=self.poison_images.to(device),
            poison_labels=self.poison_labels.to(device),
            targets=self.targets.to(device),
        )


def poison_count(batch_size: int, poison_rate: float) -> int:
    """round(rate * n) with halves rounded up."""
    return min(batch_size, int(math.floor(poison_rate * batch_size + 0.5)))


def partition_poison(
    images: torch.Tensor,
    labels: torch.Tensor,
    poison_rate: float,
    num_classes: int,
    generator: Optional[torch.Generator] = None,
    all_targets: bool = False,
    fixed_target: Optional[int] = None,
) -> PoisonSplit:
    """Split a minibatch into disjoint S_c and S_p and attach a target c != y to S_p.

    The poisoned subset is drawn uniformly from ``generator``; clean samples
    keep their original order. With ``all_targets`` every poisoned sample is
    paired with each of its ``num_classes - 1`` wrong labels instead of one
    sampled target. ``fixed_target`` turns the split into an all-to-one one.
    """
    n = int(labels.shape[0])
    if n == 0:
        raise InputError("Cannot partition an empty minibatch")
    if images.shape[0] != n:
        raise InputError(f"{images.shape[0]} images but {n} labels")

    k = poison_count(n, poison_rate)
    if k == 0:
        empty = labels[:0]
        return PoisonSplit(images, labels, images[:0], empty, empty)

    chosen = torch.randperm(n, generator=generator)[:k]
    is_poison = torch.zeros(n, dtype=torch.bool)
    is_poison[chosen] = True
    is_poison = is_poison.to(labels.device)
    poison_images, poison_labels = images[is_poison], labels[is_poison]

    if fixed_target is not None:
        targets = torch.full_like(poison_labels, fixed_target)
    elif all_targets:
        poison_images, poison_labels, targets = expand_all_targets(
            poison_images, poison_labels, num_classes
        )
    else:
        targets = sample_targets(poison_labels, num_classes, generator=generator)

    return PoisonSplit(
        clean_images=images[~is_poison],
        clean_labels=labels[~is_poison],
        poison_images=poison_images,
        poison_labels=poison_labels,
        targets=targets,
    )


def classifier_terms(
    classifier: nn.Module, trigger: Optional[Trigger], split: PoisonSplit
) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    """Mean clean cross-entropy over S_c and mean backdoor cross-entropy over S_p.

    A term is None when its set is empty. The trigger is treated as fixed:
    poisoned images carry no gradient back into it.
    """
    if split.num_clean == 0 and split.num_poison == 0:
        raise InputError("Both the clean and the backdoor set are empty")

    clean = None
    if split.num_clean:
        clean = F.cross_entropy(classifier(split.clean_images), split.clean_labels)

    backdoor = None
    if split.num_poison:
        if trigger is None:
            raise InputError("Backdoor samples present but no trigger given")
        with torch.no_grad():
            poisoned = poison_batch(trigger, split.targets, split.poison_images)
        backdoor = F.cross_entropy(classifier(poisoned), split.targets)
    return clean, backdoor


def combine_terms(
    clean: Optional[torch.Tensor],
    backdoor: Optional[torch.Tensor],
    alpha: float,
    weighting: str = "additive",
) -> torch.Tensor:
    """Weight the two classifier terms.

    ``additive``: clean + alpha * backdoor. ``convex``: alpha * clean +
    (1 - alpha) * backdoor. A missing term leaves the other one unweighted.
    """
    if clean is None and backdoor is None:
        raise InputError("Both the clean and the backdoor set are empty")
    if backdoor is None:
        return clean  # type: ignore[return-value]
    if clean is None:
        return backdoor
    if weighting == "additive":
        return clean + alpha * backdoor
    if weighting == "convex":
        return alpha * clean + (1.0 - alpha) * backdoor
    raise ConfigurationError(
        f"Unknown loss weighting '{weighting}'", key="loss_weighting"
    )


def classifier_loss(
    classifier: nn.Module,
    gen_frozen: Optional[Trigger],
    split: PoisonSplit,
    alpha: float,
    weighting: str = "additive",
) -> torch.Tensor:
    """Outer objective: clean loss plus alpha-weighted loss on triggered samples.

    Args:
        classifier: Model being poisoned; gradients flow to its parameters only
        gen_frozen: Live (lazily synced) generator or a patch table
        split: Output of ``partition_poison``
        alpha: Mixing weight in [0, 1]
        weighting: ``additive`` or ``convex``

    Raises:
        InputError: Both sets empty
    """
    clean, backdoor = classifier_terms(classifier, gen_frozen, split)
    return combine_terms(clean, backdoor, alpha, weighting)


def trigger_loss(
    classifier_frozen: nn.Module,
    gen: ConditionalTriggerGenerator,
    split: PoisonSplit,
    beta: float,
) -> torch.Tensor:
    """Inner objective: backdoor cross-entropy minus beta times the mean pattern norm.

    Raises:
        InputError: S_p is empty
    """
    if split.num_poison == 0:
        raise InputError("Trigger loss needs at least one backdoor sample")
    pattern = gen(split.targets, split.poison_images)
    poisoned = (split.poison_images + pattern).clamp(0.0, 1.0)
    ce = F.cross_entropy(classifier_frozen(poisoned), split.targets)
    norm = pattern.flatten(1).norm(p=2, dim=1).mean()
    return ce - beta * norm


def sync_trigger(
    live: nn.Module, shadow: nn.Module, iteration: int, sync_every: int
) -> bool:
    """Copy shadow parameters and buffers into ``live`` every ``sync_every`` iterations.

    A copy happens when ``iteration % sync_every == 0``. Values are copied, so
    later shadow updates never reach ``live``. Returns True when a copy happened.
    """
    if sync_every < 1:
        raise ConfigurationError(
            f"sync_every must be >= 1, got {sync_every}", key="sync_every"
        )
    if iteration % sync_every != 0:
        return False
    live.load_state_dict(shadow.state_dict())
    return True


def build_optimizer(
    parameters, lr: float, momentum: float, weight_decay: float = 0.0
) -> torch.optim.SGD:
    return torch.optim.SGD(
        parameters, lr=lr, momentum=momentum, weight_decay=weight_decay
    )


def mean_pattern_norm(
    gen: ConditionalTriggerGenerator, dataset: LabeledImageSet, batch_size: int = 256
) -> float:
    """Mean per-sample L2 norm of g(c, x) with c = (y + 1) mod C."""
    device = next(gen.parameters()).device
    total, count = 0.0, 0
    with torch.no_grad(), evaluating(gen):
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size].to(device)
            labels = dataset.labels[start : start + batch_size].to(device)
            targets = (labels + 1) % gen.num_classes
            norms = gen(targets, images).flatten(1).norm(p=2, dim=1)
            total += float(norms.sum())
            count += int(norms.numel())
    return total / max(count, 1)


@dataclass
class TrainResult:
    classifier: ClassifierNet
    history: TrainHistory
    trigger: Optional[Trigger] = None

    @property
    def generator(self) -> Optional[ConditionalTriggerGenerator]:
        if isinstance(self.trigger, ConditionalTriggerGenerator):
            return self.trigger
        return None


class MarksmanTrainer:
    """Runs one training job in one of the ``TRAIN_MODES``."""

    def __init__(
        self,
        config: TrainConfig,
        num_classes: int,
        image_shape,
        mode: str = "marksman",
        device: Union[str, torch.device, None] = None,
        frozen_generator: Optional[ConditionalTriggerGenerator] = None,
        checkpoint_path: Optional[Path] = None,
        num_workers: int = 0,
        show_progress: bool = True,
    ):
        """Initialize the trainer.

        Args:
            config: Validated training hyperparameters
            num_classes: Number of labels
            image_shape: C x H x W of the inputs
            mode: One of ``marksman``, ``benign``, ``patchmt``, ``frozen``
            device: Torch device (``auto`` when None)
            frozen_generator: Trigger used by the ``frozen`` mode, never updated
            checkpoint_path: Where resumable training state is written
            num_workers: DataLoader workers
            show_progress: Display a tqdm bar over epochs
        """
        if mode not in TRAIN_MODES:
            raise ConfigurationError(f"Unknown training mode '{mode}'", key="method")
        if mode == "frozen" and frozen_generator is None:
            raise ConfigurationError("Frozen-generator training needs a generator")
        self.config = config.validate()
        self.num_classes = num_classes
        self.image_shape = tuple(int(d) for d in image_shape)
        self.mode = mode
        if isinstance(device, torch.device):
            self.device = device
        else:
            self.device = resolve_device(device or "auto")
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.num_workers = num_workers
        self.show_progress = show_progress

        arch = config.arch or default_arch_for_shape(self.image_shape)
        self.classifier = build_classifier(
            arch, num_classes, self.image_shape, seed=config.seed
        ).to(self.device)

        self.shadow: Optional[ConditionalTriggerGenerator] = None
        self.live: Optional[ConditionalTriggerGenerator] = None
        self.patch_table: Optional[PatchTriggerTable] = None
        if mode == "marksman":
            self.shadow = build_generator(
                num_classes, self.image_shape, config.epsilon, seed=config.seed + 1
            ).to(self.device)
            self.live = copy.deepcopy(self.shadow)
            self.live.eval()
            self.live.requires_grad_(False)
        elif mode == "patchmt":
            self.patch_table = build_patch_table(
                num_classes, self.image_shape, config.patch_size
            )
        elif mode == "frozen":
            self.live = frozen_generator.to(self.device)  # type: ignore[union-attr]
            self.live.eval()

        self.optimizer = build_optimizer(
            self.classifier.parameters(),
            config.classifier_lr,
            config.momentum,
            config.weight_decay,
        )
        self.scheduler = MultiStepLR(
            self.optimizer, milestones=config.lr_milestones, gamma=config.lr_decay
        )
        self.trigger_optimizer = None
        self.trigger_scheduler = None
        if self.shadow is not None:
            self.trigger_optimizer = build_optimizer(
                self.shadow.parameters(), config.effective_trigger_lr, config.momentum
            )
            if config.trigger_follows_schedule:
                self.trigger_scheduler = MultiStepLR(
                    self.trigger_optimizer,
                    milestones=config.lr_milestones,
                    gamma=config.lr_decay,
                )

        self.data_rng = make_generator(config.seed)
        self.augment_rng = make_generator(config.seed + 1)
        self.poison_rng = make_generator(config.seed + 2)

        self.sync_every = config.sync_every or 1
        self.history = TrainHistory()
        self.epoch = 0
        self.iteration = 0
        self._bad_streak = 0

    @property
    def trigger(self) -> Optional[Trigger]:
        """The trigger the classifier is poisoned with."""
        return self.patch_table if self.patch_table is not None else self.live

    def _split(self, images: torch.Tensor, labels: torch.Tensor) -> PoisonSplit:
        if self.mode == "benign":
            return PoisonSplit(images, labels, images[:0], labels[:0], labels[:0])
        return partition_poison(
            images,
            labels,
            self.config.poison_rate,
            self.num_classes,
            generator=self.poison_rng,
            all_targets=self.config.all_targets,
            fixed_target=self.config.fixed_target,
        )

    def step(
        self, images: torch.Tensor, labels: torch.Tensor
    ) -> Optional[IterationRecord]:
        """One iteration: classifier step, shadow-trigger step, lazy sync.

        Returns the recorded losses, or None when a loss was non-finite.
        """
        cfg = self.config
        split = self._split(images, labels).to(self.device)

        self.classifier.train()
        clean, backdoor = classifier_terms(self.classifier, self.trigger, split)
        loss = combine_terms(clean, backdoor, cfg.alpha, cfg.loss_weighting)
        finite = bool(torch.isfinite(loss))
        if finite:
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()

        t_value = 0.0
        shadow, t_optimizer = self.shadow, self.trigger_optimizer
        if shadow is not None and t_optimizer is not None and split.num_poison:
            with evaluating(self.classifier):
                shadow.train()
                t_loss = trigger_loss(self.classifier, shadow, split, cfg.beta)
                if torch.isfinite(t_loss):
                    t_optimizer.zero_grad(set_to_none=True)
                    t_loss.backward(inputs=list(shadow.parameters()))
                    t_optimizer.step()
                    t_value = float(t_loss.detach())
                else:
                    finite = False

        if shadow is not None and self.live is not None:
            sync_trigger(self.live, shadow, self.iteration, self.sync_every)

        record = None
        if finite:
            self._bad_streak = 0
            record = IterationRecord(
                iteration=self.iteration,
                epoch=self.epoch,
                clean_loss=float(clean.detach()) if clean is not None else 0.0,
                backdoor_loss=(
                    float(backdoor.detach()) if backdoor is not None else 0.0
                ),
                trigger_loss=t_value,
            )
            self.history.record_iteration(record)
        else:
            self._bad_streak += 1
            logger.warning(
                f"Non-finite loss at iteration {self.iteration}, step skipped"
            )
            if self._bad_streak >= cfg.divergence_patience:
                raise TrainingError(
                    f"Training diverged: non-finite loss for {self._bad_streak} "
                    f"consecutive iterations",
                    iteration=self.iteration,
                )
        self.iteration += 1
        return record

    def fit(
        self,
        trainset: LabeledImageSet,
        probe_set: Optional[LabeledImageSet] = None,
        resume: bool = False,
    ) -> TrainResult:
        """Train until the configured iteration budget is spent.

        Args:
            trainset: Training data
            probe_set: Held-out data for per-epoch metrics, disjoint from the
                training set
            resume: Continue from ``checkpoint_path`` when it exists

        Raises:
            TrainingError: Divergence (carries the iteration index)
        """
        cfg = self.config
        if len(trainset) == 0:
            raise InputError("Training set is empty")
        if tuple(trainset.image_shape) != self.image_shape:
            raise InputError(
                f"Training images are {trainset.image_shape}, "
                f"trainer expects {self.image_shape}"
            )

        iters_per_epoch = math.ceil(len(trainset) / cfg.batch_size)
        total = cfg.iterations or cfg.epochs * iters_per_epoch
        num_epochs = math.ceil(total / iters_per_epoch)
        self.sync_every = cfg.sync_every or iters_per_epoch
        if cfg.augment:
            policy = AugmentPolicy.for_dataset(trainset.name)
        else:
            policy = AugmentPolicy.identity()

        checkpoint = self.checkpoint_path
        if resume and checkpoint is not None and checkpoint.exists():
            self.load_state(checkpoint)
            logger.info(f"Resumed from {checkpoint} at epoch {self.epoch}")

        if self.live is not None and self.shadow is not None:
            if self.history.initial_pattern_norm is None:
                if probe_set is not None and len(probe_set):
                    reference = probe_set
                else:
                    reference = trainset.head(cfg.batch_size)
                self.history.initial_pattern_norm = mean_pattern_norm(
                    self.live, reference
                )

        logger.info(
            f"Training {self.mode} ({self.classifier.arch_id}) on {trainset.name}: "
            f"{total} iterations, {iters_per_epoch} per epoch, "
            f"sync every {self.sync_every}"
        )
        loader = make_loader(
            trainset,
            cfg.batch_size,
            shuffle=True,
            generator=self.data_rng,
            num_workers=self.num_workers,
        )
        progress = tqdm(
            range(self.epoch, num_epochs),
            desc=f"{self.mode}",
            unit="epoch",
            disable=not self.show_progress,
            initial=self.epoch,
            total=num_epochs,
        )
        for epoch in progress:
            self.epoch = epoch
            sums = [0.0, 0.0, 0.0]
            steps = 0
            for images, labels in loader:
                if self.iteration >= total:
                    break
                images = augment(images, policy, self.augment_rng)
                record = self.step(images, labels)
                if record is not None:
                    sums[0] += record.clean_loss
                    sums[1] += record.backdoor_loss
                    sums[2] += record.trigger_loss
                    steps += 1
                    logger.debug(
                        f"it {record.iteration}: clean {record.clean_loss:.4f} "
                        f"backdoor {record.backdoor_loss:.4f} "
                        f"trigger {record.trigger_loss:.4f}"
                    )

            lr = self.optimizer.param_groups[0]["lr"]
            self.scheduler.step()
            if self.trigger_scheduler is not None:
                self.trigger_scheduler.step()

            means = [s / max(steps, 1) for s in sums]
            record = EpochRecord(
                epoch=epoch,
                iteration=self.iteration,
                classifier_lr=lr,
                clean_loss=means[0],
                backdoor_loss=means[1],
                trigger_loss=means[2],
            )
            self._probe(record, probe_set)
            self.history.record_epoch(record)
            progress.set_postfix(
                clean=f"{means[0]:.3f}",
                backdoor=f"{means[1]:.3f}",
                trigger=f"{means[2]:.3f}",
            )
            logger.info(
                f"Epoch {epoch + 1}/{num_epochs}: clean loss {means[0]:.4f}, "
                f"backdoor loss {means[1]:.4f}, acc {record.clean_accuracy}, "
                f"asr {record.asr}"
            )

            self.epoch = epoch + 1
            if self.checkpoint_path is not None and (
                self.epoch % cfg.checkpoint_every == 0 or self.epoch == num_epochs
            ):
                self.save_state(self.checkpoint_path)

        self.classifier.eval()
        if self.live is not None:
            # the returned generator is the one the classifier was last poisoned with
            self.live.eval()
        return TrainResult(
            classifier=self.classifier, history=self.history, trigger=self.trigger
        )

    def _probe(self, record: EpochRecord, probe_set: Optional[LabeledImageSet]):
        if probe_set is None or len(probe_set) == 0:
            return
        from .evaluation import all_target_asr, clean_accuracy

        batch_size = max(self.config.batch_size, 256)
        if self.trigger is not None and self.mode != "benign":
            metrics = all_target_asr(
                self.classifier, self.trigger, probe_set, batch_size=batch_size
            )
            record.clean_accuracy = metrics.clean_accuracy
            record.asr = metrics.asr
        else:
            record.clean_accuracy = clean_accuracy(
                self.classifier, probe_set, batch_size=batch_size
            )
        if self.live is not None and self.mode == "marksman":
            record.pattern_norm = mean_pattern_norm(self.live, probe_set, batch_size)

    def state_dict(self) -> Dict[str, Any]:
        state: Dict[str, Any] = {
            "mode": self.mode,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "bad_streak": self._bad_streak,
            "classifier": self.classifier.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "rng": {
                "data": self.data_rng.get_state(),
                "augment": self.augment_rng.get_state(),
                "poison": self.poison_rng.get_state(),
            },
            "history": self.history.to_dict(),
        }
        shadow, live, t_optimizer = self.shadow, self.live, self.trigger_optimizer
        if shadow is not None and live is not None and t_optimizer is not None:
            state["shadow"] = shadow.state_dict()
            state["live"] = live.state_dict()
            state["trigger_optimizer"] = t_optimizer.state_dict()
            if self.trigger_scheduler is not None:
                state["trigger_scheduler"] = self.trigger_scheduler.state_dict()
        return state

    def save_state(self, path: Path) -> Path:
        logger.debug(f"Checkpointing epoch {self.epoch} to {path}")
        return save_training_state(path, self.state_dict())

    def load_state(self, path: Path):
        """Restore a checkpoint written by ``save_state`` with an identical config."""
        state = load_training_state(path)
        same_mode = state.get("mode") == self.mode
        if not same_mode or state.get("config") != self.config.to_dict():
            raise ConfigurationError(
                f"Checkpoint {path} was written by a different configuration; "
                f"remove it or start a new output directory"
            )
        self.epoch = int(state["epoch"])
        self.iteration = int(state["iteration"])
        self._bad_streak = int(state.get("bad_streak", 0))
        self.classifier.load_state_dict(state["classifier"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.data_rng.set_state(state["rng"]["data"])
        self.augment_rng.set_state(state["rng"]["augment"])
        self.poison_rng.set_state(state["rng"]["poison"])
        self.history = TrainHistory.from_dict(state["history"])
        shadow, live, t_optimizer = self.shadow, self.live, self.trigger_optimizer
        if shadow is not None and live is not None and t_optimizer is not None:
            shadow.load_state_dict(state["shadow"])
            live.load_state_dict(state["live"])
            t_optimizer.load_state_dict(state["trigger_optimizer"])
            if self.trigger_scheduler is not None and "trigger_scheduler" in state:
                self.trigger_scheduler.load_state_dict(state["trigger_scheduler"])


def default_arch_for_shape(image_shape) -> str:
    if int(image_shape[0]) == 1:
        return default_arch("mnist")
    return default_arch("cifar10")


def marksman_train(
    trainset: LabeledImageSet,
    config: TrainConfig,
    probe_set: Optional[LabeledImageSet] = None,
    device: Union[str, torch.device, None] = None,
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
    num_workers: int = 0,
) -> Tuple[ClassifierNet, ConditionalTriggerGenerator, TrainHistory]:
    """Jointly train a poisoned classifier and its class-conditional generator."""
    trainer = MarksmanTrainer(
        config,
        trainset.num_classes,
        trainset.image_shape,
        mode="marksman",
        device=device,
        checkpoint_path=checkpoint_path,
        num_workers=num_workers,
    )
    result = trainer.fit(trainset, probe_set, resume=resume)
    generator = cast(ConditionalTriggerGenerator, result.generator)
    return result.classifier, generator, result.history


def train_benign(
    trainset: LabeledImageSet,
    config: TrainConfig,
    probe_set: Optional[LabeledImageSet] = None,
    device: Union[str, torch.device, None] = None,
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
    num_workers: int = 0,
) -> Tuple[ClassifierNet, TrainHistory]:
    """Standard cross-entropy training with the same schedule and seeds."""
    trainer = MarksmanTrainer(
        config,
        trainset.num_classes,
        trainset.image_shape,
        mode="benign",
        device=device,
        checkpoint_path=checkpoint_path,
        num_workers=num_workers,
    )
    result = trainer.fit(trainset, probe_set, resume=resume)
    return result.classifier, result.history


def train_patchmt(
    trainset: LabeledImageSet,
    config: TrainConfig,
    probe_set: Optional[LabeledImageSet] = None,
    device: Union[str, torch.device, None] = None,
    checkpoint_path: Optional[Path] = None,
    resume: bool = False,
    num_workers: int = 0,
) -> Tuple[ClassifierNet, PatchTriggerTable, TrainHistory]:
    """Multi-target patch baseline (all-to-one when ``config.fixed_target`` is set)."""
    trainer = MarksmanTrainer(
        config,
        trainset.num_classes,
        trainset.image_shape,
        mode="patchmt",
        device=device,
        checkpoint_path=checkpoint_path,
        num_workers=num_workers,
    )
    result = trainer.fit(trainset, probe_set, resume=resume)
    table = cast(PatchTriggerTable, result.trigger)
    return result.classifier, table, result.history


def train_with_frozen_generator(
    trainset: LabeledImageSet,
    generator: ConditionalTriggerGenerator,
    config: TrainConfig,
    probe_set: Optional[LabeledImageSet] = None,
    device: Union[str, torch.device, None] = None,
    num_workers: int = 0,
) -> Tuple[ClassifierNet, TrainHistory]:
    """Train a fresh classifier on data poisoned by a never-updated generator."""
    trainer = MarksmanTrainer(
        config,
        trainset.num_classes,
        trainset.image_shape,
        mode="frozen",
        device=device,
        frozen_generator=generator,
        num_workers=num_workers,
    )
    result = trainer.fit(trainset, probe_set)
    return result.classifier, result.history
