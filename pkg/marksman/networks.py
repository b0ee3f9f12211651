"""Classifier architectures carrying the poisoned parameters."""

import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Type

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, InputError
from .utils import seeded

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mnist_cnn", "small_resnet", "small_conv_alt")


class ClassifierNet(nn.Module):
    """Base class: ``forward(x) == linear(penultimate(x))``.

    Subclasses build ``self.linear`` (the output layer) and expose the
    module producing the last convolutional activation map through
    ``last_conv_activation`` for channel-level inspection.
    """

    arch_id: str = ""

    def __init__(self, num_classes: int, input_shape: Tuple[int, int, int]):
        super().__init__()
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.linear: nn.Linear

    @property
    def feature_dim(self) -> int:
        return self.linear.in_features

    @property
    def last_conv_activation(self) -> nn.Module:
        raise NotImplementedError

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(self.penultimate(x))

    def check_input(self, images: torch.Tensor):
        """Raise InputError unless ``images`` is a B x C x H x W batch of this shape."""
        if images.dim() != 4 or tuple(images.shape[1:]) != self.input_shape:
            raise InputError(
                f"{self.arch_id} expects B x {' x '.join(map(str, self.input_shape))} "
                f"input, got {tuple(images.shape)}"
            )

    def metadata(self) -> Dict[str, object]:
        return {
            "arch_id": self.arch_id,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }


class MNISTCNN(ClassifierNet):
    """Three strided 3x3 convolutions, a 512-unit hidden layer and a linear output."""

    arch_id = "mnist_cnn"

    def __init__(self, num_classes: int, input_shape: Tuple[int, int, int]):
        super().__init__(num_classes, input_shape)
        channels = input_shape[0]
        self.features = nn.Sequential(
            nn.Conv2d(channels, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=0),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, stride=2, padding=0),
            nn.ReLU(inplace=True),
        )
        flat = _flat_size(self.features, input_shape)
        self.fc = nn.Sequential(
            nn.Flatten(), nn.Linear(flat, 512), nn.ReLU(inplace=True)
        )
        self.linear = nn.Linear(512, num_classes)

    @property
    def last_conv_activation(self) -> nn.Module:
        return self.features[-1]

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


class PreActBlock(nn.Module):
    """Pre-activation residual block."""

    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(
            in_planes, planes, 3, stride=stride, padding=1, bias=False
        )
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut: Optional[nn.Module] = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class SmallPreActResNet(ClassifierNet):
    """18-layer pre-activation ResNet at half the reference width."""

    arch_id = "small_resnet"

    def __init__(
        self,
        num_classes: int,
        input_shape: Tuple[int, int, int],
        width: int = 32,
        blocks: Sequence[int] = (2, 2, 2, 2),
    ):
        super().__init__(num_classes, input_shape)
        self.in_planes = width
        self.conv1 = nn.Conv2d(
            input_shape[0], width, 3, stride=1, padding=1, bias=False
        )
        self.layer1 = self._make_layer(width, blocks[0], stride=1)
        self.layer2 = self._make_layer(width * 2, blocks[1], stride=2)
        self.layer3 = self._make_layer(width * 4, blocks[2], stride=2)
        self.layer4 = self._make_layer(width * 8, blocks[3], stride=2)
        self.final = nn.Sequential(nn.BatchNorm2d(width * 8), nn.ReLU(inplace=False))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.linear = nn.Linear(width * 8, num_classes)

    def _make_layer(self, planes: int, num_blocks: int, stride: int) -> nn.Sequential:
        layers: List[nn.Module] = []
        for block_stride in [stride] + [1] * (num_blocks - 1):
            layers.append(PreActBlock(self.in_planes, planes, block_stride))
            self.in_planes = planes
        return nn.Sequential(*layers)

    @property
    def last_conv_activation(self) -> nn.Module:
        return self.final

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(x)
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = self.final(out)
        return torch.flatten(self.pool(out), 1)


class SmallVGG(ClassifierNet):
    """Plain VGG-style stack used as the second architecture of transfer runs."""

    arch_id = "small_conv_alt"

    LAYOUT = (32, 32, "M", 64, 64, "M", 128, "M")

    def __init__(self, num_classes: int, input_shape: Tuple[int, int, int]):
        super().__init__(num_classes, input_shape)
        layers: List[nn.Module] = []
        in_channels = input_shape[0]
        for item in self.LAYOUT:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [
                    nn.Conv2d(in_channels, int(item), 3, padding=1),
                    nn.BatchNorm2d(int(item)),
                    nn.ReLU(inplace=True),
                ]
                in_channels = int(item)
        self.features = nn.Sequential(*layers)
        flat = _flat_size(self.features, input_shape)
        self.fc = nn.Sequential(
            nn.Flatten(), nn.Linear(flat, 256), nn.ReLU(inplace=True)
        )
        self.linear = nn.Linear(256, num_classes)

    @property
    def last_conv_activation(self) -> nn.Module:
        # the ReLU preceding the final max-pool
        return self.features[-2]

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


_REGISTRY: Dict[str, Type[ClassifierNet]] = {
    "mnist_cnn": MNISTCNN,
    "small_resnet": SmallPreActResNet,
    "small_conv_alt": SmallVGG,
}


def _flat_size(features: nn.Module, input_shape: Tuple[int, int, int]) -> int:
    with torch.no_grad(), evaluating(features):
        out = features(torch.zeros(1, *input_shape))
    if out.numel() == 0:
        raise ConfigurationError(
            f"Input shape {tuple(input_shape)} collapses to nothing"
        )
    return out.numel()


def build_classifier(
    arch_id: str,
    num_classes: int,
    input_shape: Sequence[int],
    seed: Optional[int] = None,
) -> ClassifierNet:
    """Create a freshly initialised classifier.

    Args:
        arch_id: One of ``mnist_cnn``, ``small_resnet``, ``small_conv_alt``
        num_classes: Number of output logits
        input_shape: C x H x W of the inputs
        seed: When given, initialisation is drawn from this seed only

    Raises:
        ConfigurationError: Unknown architecture or incompatible input shape
    """
    if arch_id not in _REGISTRY:
        raise ConfigurationError(
            f"Unknown architecture '{arch_id}', expected one of {list(ARCHITECTURES)}",
            key="arch",
        )
    shape = tuple(int(d) for d in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigurationError(f"input_shape must be C x H x W, got {shape}")
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")

    with seeded(seed):
        try:
            model = _REGISTRY[arch_id](num_classes, shape)  # type: ignore[arg-type]
        except RuntimeError as e:
            raise ConfigurationError(
                f"{arch_id} cannot accept inputs of shape {shape}: {e}"
            ) from e

    logger.debug(
        f"Built {arch_id} with {sum(p.numel() for p in model.parameters())} parameters"
    )
    return model


def classifier_forward(classifier: ClassifierNet, images: torch.Tensor) -> torch.Tensor:
    """B x num_classes logits, differentiable w.r.t. parameters and input."""
    classifier.check_input(images)
    return classifier(images)


def penultimate_features(
    classifier: ClassifierNet, images: torch.Tensor
) -> torch.Tensor:
    """B x D activations of the layer feeding the output layer."""
    classifier.check_input(images)
    return classifier.penultimate(images)


@contextmanager
def evaluating(*modules: nn.Module) -> Iterator[None]:
    """Put modules in eval mode for the block, restoring each one's previous mode."""
    modes = [m.training for m in modules]
    try:
        for m in modules:
            m.eval()
        yield
    finally:
        for m, mode in zip(modules, modes):
            m.train(mode)


def parameter_snapshot(module: nn.Module) -> Dict[str, torch.Tensor]:
    """Detached copies of every parameter and buffer."""
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_state(module: nn.Module, snapshot: Dict[str, torch.Tensor]) -> bool:
    """True when ``module`` still matches ``snapshot`` exactly."""
    state = module.state_dict()
    return state.keys() == snapshot.keys() and all(
        torch.equal(state[k], snapshot[k]) for k in snapshot
    )
