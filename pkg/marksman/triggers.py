"""Class-conditional trigger generation, patch triggers and target sampling."""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .exceptions import ConfigurationError, InputError
from .utils import seeded

logger = logging.getLogger(__name__)


def _encoder_sizes(size: int) -> List[int]:
    """Spatial size after each encoder stage (conv s3, pool s2, conv s2, pool s1)."""
    sizes = [size]
    sizes.append((sizes[-1] + 2 - 3) // 3 + 1)
    sizes.append((sizes[-1] - 2) // 2 + 1)
    sizes.append((sizes[-1] + 2 - 3) // 2 + 1)
    sizes.append(sizes[-1] - 1)
    return sizes


def _solve_decoder_padding(
    bottleneck: int, target: int
) -> Optional[Tuple[int, int, int, int]]:
    """(padding, output_padding) of the last two decoder stages giving ``target``.

    Candidates are ranked by distance from the reference (1, 0, 1, 0).
    """
    first = (bottleneck - 1) * 2 + 3
    best = None
    best_cost = None
    for p2, op2, p3, op3 in itertools.product(range(5), range(3), range(2), range(2)):
        second = (first - 1) * 3 - 2 * p2 + 5 + op2
        third = (second - 1) * 2 - 2 * p3 + 2 + op3
        if third != target:
            continue
        cost = abs(p2 - 1) + op2 + abs(p3 - 1) + op3
        if best_cost is None or cost < best_cost:
            best, best_cost = (p2, op2, p3, op3), cost
    return best


class ConditionalTriggerGenerator(nn.Module):
    """Autoencoder g(c, x) producing an L-inf bounded, class-conditional pattern.

    The target class is looked up in a learnable ``num_classes x num_classes``
    embedding table, broadcast spatially and concatenated to the image
    channels at the encoder input. The output is ``epsilon * tanh(raw)``,
    so ``max |g(c, x)| <= epsilon`` holds for every input.
    """

    def __init__(
        self, num_classes: int, image_shape: Tuple[int, int, int], epsilon: float
    ):
        super().__init__()
        channels, height, width = image_shape
        self.num_classes = num_classes
        self.image_shape = (channels, height, width)
        self.epsilon = float(epsilon)

        pads = []
        for size in (height, width):
            sizes = _encoder_sizes(size)
            if min(sizes) < 1 or sizes[1] < 2 or sizes[3] < 2:
                raise ConfigurationError(
                    f"Image size {height}x{width} is smaller than the generator's "
                    f"encoder footprint"
                )
            solution = _solve_decoder_padding(sizes[-1], size)
            if solution is None:
                raise ConfigurationError(
                    f"No decoder padding reproduces spatial size {size}"
                )
            pads.append(solution)
        (p2h, op2h, p3h, op3h), (p2w, op2w, p3w, op3w) = pads

        self.class_embedding = nn.Embedding(num_classes, num_classes)
        self.encoder = nn.Sequential(
            nn.Conv2d(channels + num_classes, 16, 3, stride=3, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(True),
            nn.MaxPool2d(2, stride=2),
            nn.Conv2d(16, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(True),
            nn.MaxPool2d(2, stride=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(64, 128, 3, stride=2),
            nn.BatchNorm2d(128),
            nn.ReLU(True),
            nn.ConvTranspose2d(
                128, 64, 5, stride=3, padding=(p2h, p2w), output_padding=(op2h, op2w)
            ),
            nn.BatchNorm2d(64),
            nn.ReLU(True),
            nn.ConvTranspose2d(
                64,
                channels,
                2,
                stride=2,
                padding=(p3h, p3w),
                output_padding=(op3h, op3w),
            ),
            nn.BatchNorm2d(channels),
        )

    @property
    def out_channels(self) -> int:
        return self.image_shape[0]

    def raw_output(self, targets: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
        """Decoder output before the bounded tanh squashing."""
        batch, _, height, width = images.shape
        embedding = self.class_embedding(targets)
        condition = embedding[:, :, None, None].expand(
            batch, self.num_classes, height, width
        )
        return self.decoder(self.encoder(torch.cat([images, condition], dim=1)))

    def forward(self, targets: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
        return self.epsilon * torch.tanh(self.raw_output(targets, images))

    def metadata(self) -> Dict[str, object]:
        return {
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "epsilon": self.epsilon,
        }


def build_generator(
    num_classes: int,
    image_shape: Sequence[int],
    epsilon: float,
    seed: Optional[int] = None,
) -> ConditionalTriggerGenerator:
    """Create a freshly initialised conditional trigger generator.

    Raises:
        ConfigurationError: Non-positive epsilon, fewer than two classes or an
            image smaller than the encoder footprint
    """
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be > 0, got {epsilon}", key="epsilon")
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    shape = tuple(int(d) for d in image_shape)
    if len(shape) != 3:
        raise ConfigurationError(f"image_shape must be C x H x W, got {shape}")

    with seeded(seed):
        generator = ConditionalTriggerGenerator(
            num_classes, (shape[0], shape[1], shape[2]), epsilon
        )
    return generator


def _check_trigger_inputs(
    gen: ConditionalTriggerGenerator, targets: torch.Tensor, images: torch.Tensor
):
    if images.dim() != 4 or tuple(images.shape[1:]) != gen.image_shape:
        raise InputError(
            f"Generator expects B x {' x '.join(map(str, gen.image_shape))} images, "
            f"got {tuple(images.shape)}"
        )
    if targets.dim() != 1 or targets.shape[0] != images.shape[0]:
        raise InputError(
            f"Expected {images.shape[0]} target labels, "
            f"got shape {tuple(targets.shape)}"
        )
    if targets.numel() and (targets.min() < 0 or targets.max() >= gen.num_classes):
        raise InputError(f"Target labels must lie in [0, {gen.num_classes})")


def generate_pattern(
    gen: ConditionalTriggerGenerator, targets: torch.Tensor, images: torch.Tensor
) -> torch.Tensor:
    """Trigger patterns g(c, x), each bounded by ``gen.epsilon`` in L-inf."""
    _check_trigger_inputs(gen, targets, images)
    return gen(targets, images)


def apply_trigger(
    gen: ConditionalTriggerGenerator, targets: torch.Tensor, images: torch.Tensor
) -> torch.Tensor:
    """Poisoned images ``clip(x + g(c, x), 0, 1)``."""
    return (images + generate_pattern(gen, targets, images)).clamp(0.0, 1.0)


@dataclass
class PatchTrigger:
    """A pixel block written at (row, col); ``pattern`` is C x h x w."""

    row: int
    col: int
    pattern: torch.Tensor

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.pattern.shape[1:])  # type: ignore[return-value]


@dataclass
class PatchTriggerTable:
    """Per-target-class patch triggers, mutually distinct."""

    image_shape: Tuple[int, int, int]
    patches: Dict[int, PatchTrigger] = field(default_factory=dict)

    def __post_init__(self):
        channels, height, width = self.image_shape
        for target, patch in self.patches.items():
            h, w = patch.size
            if patch.pattern.shape[0] != channels:
                raise ConfigurationError(
                    f"Patch for class {target} has {patch.pattern.shape[0]} channels, "
                    f"images have {channels}"
                )
            inside = (
                patch.row >= 0
                and patch.col >= 0
                and patch.row + h <= height
                and patch.col + w <= width
            )
            if not inside:
                raise ConfigurationError(
                    f"Patch for class {target} exceeds image bounds"
                )
        keys = list(self.patches)
        for a, b in itertools.combinations(keys, 2):
            pa, pb = self.patches[a], self.patches[b]
            if (
                pa.row == pb.row
                and pa.col == pb.col
                and pa.pattern.shape == pb.pattern.shape
                and torch.equal(pa.pattern, pb.pattern)
            ):
                raise ConfigurationError(
                    f"Patches for classes {a} and {b} are identical"
                )

    @property
    def num_classes(self) -> int:
        return len(self.patches)


def build_patch_table(
    num_classes: int, image_shape: Sequence[int], patch_size: int = 3
) -> PatchTriggerTable:
    """Distinct ``patch_size`` blocks per class, cycling through the four corners.

    Class ``c`` sits in corner ``c % 4`` with the ``c // 4``-th binary mask
    (masks ordered by decreasing number of lit pixels). On RGB images the
    lit pixels take a per-class colour so neighbouring classes differ further.
    """
    channels, height, width = (int(d) for d in image_shape)
    cells = patch_size * patch_size
    masks = sorted(range(1, 2**cells), key=lambda m: (-bin(m).count("1"), m))
    if num_classes > 4 * len(masks):
        raise ConfigurationError(
            f"Cannot build {num_classes} distinct {patch_size}x{patch_size} patches"
        )
    corners = [
        (0, 0),
        (0, width - patch_size),
        (height - patch_size, 0),
        (height - patch_size, width - patch_size),
    ]
    colours = [(1.0, 1.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]

    patches = {}
    for target in range(num_classes):
        row, col = corners[target % 4]
        mask = masks[target // 4]
        bits = torch.tensor(
            [(mask >> i) & 1 for i in range(cells)], dtype=torch.float32
        ).reshape(patch_size, patch_size)
        if channels == 3:
            colour = torch.tensor(colours[(target // 4) % len(colours)])
            pattern = bits[None] * colour[:, None, None]
        else:
            pattern = bits[None].repeat(channels, 1, 1)
        patches[target] = PatchTrigger(row=row, col=col, pattern=pattern)

    return PatchTriggerTable(image_shape=(channels, height, width), patches=patches)


def patch_trigger(
    table: PatchTriggerTable, target: int, image: torch.Tensor
) -> torch.Tensor:
    """Copy of ``image`` (C x H x W) with the target class's patch written in."""
    if target not in table.patches:
        raise ConfigurationError(
            f"No patch trigger for target class {target}", key="target"
        )
    patch = table.patches[target]
    h, w = patch.size
    poisoned = image.clone()
    if h and w:
        pattern = patch.pattern.to(image.device, image.dtype)
        poisoned[:, patch.row : patch.row + h, patch.col : patch.col + w] = pattern
    return poisoned


def apply_patch_batch(
    table: PatchTriggerTable, targets: torch.Tensor, images: torch.Tensor
) -> torch.Tensor:
    """``patch_trigger`` over a batch with one target per image."""
    if images.shape[0] != targets.shape[0]:
        raise InputError(f"{images.shape[0]} images but {targets.shape[0]} targets")
    if images.shape[0] == 0:
        return images.clone()
    return torch.stack(
        [patch_trigger(table, int(t), img) for t, img in zip(targets.tolist(), images)]
    )


def sample_targets(
    labels: torch.Tensor, num_classes: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """One target per label, uniform over the ``num_classes - 1`` other classes."""
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    offsets = torch.randint(1, num_classes, labels.shape, generator=generator)
    return (labels + offsets.to(labels.device)) % num_classes


Trigger = Union[ConditionalTriggerGenerator, PatchTriggerTable]


def poison_batch(
    trigger: Trigger, targets: torch.Tensor, images: torch.Tensor
) -> torch.Tensor:
    """Poisoned images for either trigger family."""
    if isinstance(trigger, PatchTriggerTable):
        return apply_patch_batch(trigger, targets, images)
    return apply_trigger(trigger, targets, images)


def expand_all_targets(
    images: torch.Tensor, labels: torch.Tensor, num_classes: int
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Every (x, c) pair with c != y, grouped by sample.

    Returns (images, true labels, targets), each with ``N * (num_classes - 1)`` rows.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    offsets = torch.arange(1, num_classes, device=labels.device)
    targets = (labels[:, None] + offsets[None, :]) % num_classes
    repeats = num_classes - 1
    return (
        images.repeat_interleave(repeats, dim=0),
        labels.repeat_interleave(repeats),
        targets.reshape(-1),
    )
