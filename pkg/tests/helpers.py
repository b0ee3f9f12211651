"""Small synthetic datasets and networks shared by the test modules."""

import torch
import torch.nn as nn

from marksman.datasets import LabeledImageSet
from marksman.networks import ClassifierNet


def synthetic_set(
    n: int = 48,
    num_classes: int = 4,
    size: int = 16,
    channels: int = 1,
    seed: int = 0,
    name: str = "mnist",
) -> LabeledImageSet:
    """Labels cycle through the classes; each class lights its own horizontal band."""
    generator = torch.Generator().manual_seed(seed)
    labels = torch.arange(n) % num_classes
    images = torch.rand(n, channels, size, size, generator=generator) * 0.3
    band = max(1, size // num_classes)
    for i, label in enumerate(labels.tolist()):
        images[i, :, label * band : (label + 1) * band, :] += 0.6
    return LabeledImageSet(
        images=images.clamp(0, 1), labels=labels, num_classes=num_classes, name=name
    )


class TinyNet(ClassifierNet):
    """One strided convolution, global pooling and a linear head."""

    arch_id = "tiny"

    def __init__(self, num_classes: int = 4, input_shape=(1, 16, 16), width: int = 6):
        super().__init__(num_classes, input_shape)
        self.conv = nn.Conv2d(input_shape[0], width, 3, stride=2, padding=1)
        self.act = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.linear = nn.Linear(width, num_classes)

    @property
    def last_conv_activation(self) -> nn.Module:
        return self.act

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.act(self.conv(x))), 1)


class ConstantNet(ClassifierNet):
    """Returns the same logits for every input (still differentiable in the input)."""

    arch_id = "constant"

    def __init__(self, logits, input_shape=(1, 16, 16)):
        logits = torch.as_tensor(logits, dtype=torch.float32)
        super().__init__(logits.shape[0], input_shape)
        self.linear = nn.Linear(1, logits.shape[0])
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.copy_(logits)
        self.act = nn.Identity()

    @property
    def last_conv_activation(self) -> nn.Module:
        return self.act

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return 0.0 * x.flatten(1).sum(dim=1, keepdim=True)
