"""Dataset ingestion, augmentation and batching."""

import gzip
import logging
import math
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, TensorDataset

from .exceptions import ConfigurationError, IngestionError, InputError
from .utils import seed_worker

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSpec:
    """Static facts about a supported dataset."""

    name: str
    channels: int
    size: int
    num_classes: int


DATASETS: Dict[str, DatasetSpec] = {
    "mnist": DatasetSpec("mnist", 1, 28, 10),
    "cifar10": DatasetSpec("cifar10", 3, 32, 10),
    "gtsrb": DatasetSpec("gtsrb", 3, 32, 43),
}

SPLITS = ("train", "test")

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_CIFAR_BATCHES = {
    "train": [f"data_batch_{i}" for i in range(1, 6)],
    "test": ["test_batch"],
}
_IMAGE_SUFFIXES = {".ppm", ".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class LabeledImageSet:
    """Images in [0,1] (N x C x H x W, float32) with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str

    def __post_init__(self):
        if self.images.dim() != 4:
            raise InputError(
                f"{self.name}: images must be N x C x H x W, "
                f"got {tuple(self.images.shape)}"
            )
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InputError(
                f"{self.name}: {self.images.shape[0]} images but labels of shape "
                f"{tuple(self.labels.shape)}"
            )
        if self.images.numel() and (
            self.images.min().item() < 0.0 or self.images.max().item() > 1.0
        ):
            raise InputError(f"{self.name}: pixel values must lie in [0, 1]")
        if self.labels.numel() and (
            self.labels.min().item() < 0 or self.labels.max().item() >= self.num_classes
        ):
            raise InputError(
                f"{self.name}: labels must lie in [0, {self.num_classes})"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        """C x H x W of a single image."""
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(
        self, indices: Union[torch.Tensor, List[int], range]
    ) -> "LabeledImageSet":
        """New set holding only ``indices`` (order preserved)."""
        if isinstance(indices, range):
            indices = list(indices)
        index = torch.as_tensor(indices).long()
        return LabeledImageSet(
            images=self.images[index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            name=self.name,
        )

    def head(self, n: Optional[int]) -> "LabeledImageSet":
        """First ``n`` samples, or the whole set when ``n`` is None."""
        if n is None or n >= len(self):
            return self
        return self.subset(range(n))

    def split(self, n_first: int) -> Tuple["LabeledImageSet", "LabeledImageSet"]:
        """Split into the first ``n_first`` samples and the remainder."""
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))


@dataclass(frozen=True)
class AugmentPolicy:
    """Training-time augmentation switches."""

    random_crop: bool = False
    crop_padding: int = 4
    random_rotation: bool = False
    max_degrees: float = 10.0
    horizontal_flip: bool = False

    @property
    def is_identity(self) -> bool:
        return not (self.random_crop or self.random_rotation or self.horizontal_flip)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def for_dataset(cls, name: str) -> "AugmentPolicy":
        """Training policy per dataset: crop + rotation, plus flips for RGB sets."""
        spec = get_dataset_spec(name)
        if spec.name == "mnist":
            return cls(random_crop=True, crop_padding=2, random_rotation=True)
        return cls(
            random_crop=True,
            crop_padding=4,
            random_rotation=True,
            horizontal_flip=True,
        )


def get_dataset_spec(name: str) -> DatasetSpec:
    """Look up a dataset by name.

    Raises:
        ConfigurationError: If the dataset is unknown
    """
    key = name.lower()
    if key not in DATASETS:
        raise ConfigurationError(
            f"Unknown dataset '{name}', expected one of {sorted(DATASETS)}",
            key="dataset",
        )
    return DATASETS[key]


def load_dataset(name: str, split: str, root: Union[str, Path]) -> LabeledImageSet:
    """Load a dataset split from its standard distribution files under ``root``.

    Args:
        name: ``mnist``, ``cifar10`` or ``gtsrb``
        split: ``train`` or ``test``
        root: Dataset root directory

    Returns:
        LabeledImageSet with deterministic ordering

    Raises:
        ConfigurationError: Unknown dataset or split
        IngestionError: Missing or corrupt files
    """
    spec = get_dataset_spec(name)
    if split not in SPLITS:
        raise ConfigurationError(
            f"Unknown split '{split}', expected train or test", key="split"
        )

    root = Path(root)
    logger.info(f"Loading {spec.name}/{split} from {root}")

    if spec.name == "mnist":
        images, labels = _load_mnist(root / "mnist", split)
    elif spec.name == "cifar10":
        images, labels = _load_cifar10(root / "cifar-10-batches-py", split)
    else:
        images, labels = _load_image_folders(root / "gtsrb" / split, spec)

    dataset = LabeledImageSet(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        num_classes=spec.num_classes,
        name=spec.name,
    )
    logger.info(f"Loaded {len(dataset)} samples of shape {dataset.image_shape}")
    return dataset


def _open_maybe_gzip(path: Path) -> bytes:
    candidates = [path, path.with_name(path.name + ".gz")]
    for candidate in candidates:
        if candidate.exists():
            try:
                if candidate.suffix == ".gz":
                    with gzip.open(candidate, "rb") as f:
                        return f.read()
                return candidate.read_bytes()
            except (OSError, EOFError) as e:
                raise IngestionError(
                    f"Cannot read {candidate}: {e}", path=str(candidate)
                ) from e
    raise IngestionError(f"Missing dataset file: {path}", path=str(path))


def _read_idx(path: Path, expected_ndim: int) -> np.ndarray:
    """Decode an IDX file (big-endian header, unsigned byte payload)."""
    raw = _open_maybe_gzip(path)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IngestionError(f"Corrupt IDX header in {path}", path=str(path))
    if raw[2] != 0x08:
        raise IngestionError(
            f"Unsupported IDX element type {raw[2]:#x} in {path}", path=str(path)
        )

    ndim = raw[3]
    if ndim != expected_ndim:
        raise IngestionError(
            f"Expected {expected_ndim}-d IDX data in {path}, found {ndim}-d",
            path=str(path),
        )
    header_end = 4 + 4 * ndim
    dims = tuple(int(d) for d in np.frombuffer(raw[4:header_end], dtype=">u4"))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    if payload.size != int(np.prod(dims)):
        raise IngestionError(
            f"Truncated IDX payload in {path}: expected {int(np.prod(dims))} bytes, "
            f"found {payload.size}",
            path=str(path),
        )
    return payload.reshape(dims)


def _load_mnist(directory: Path, split: str) -> Tuple[np.ndarray, np.ndarray]:
    image_file, label_file = _MNIST_FILES[split]
    images = _read_idx(directory / image_file, expected_ndim=3)
    labels = _read_idx(directory / label_file, expected_ndim=1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{directory / image_file} has {images.shape[0]} images but "
            f"{directory / label_file} has {labels.shape[0]} labels",
            path=str(directory / label_file),
        )
    images = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return images, labels


def _load_cifar10(directory: Path, split: str) -> Tuple[np.ndarray, np.ndarray]:
    all_images = []
    all_labels = []
    for batch_name in _CIFAR_BATCHES[split]:
        path = directory / batch_name
        if not path.exists():
            raise IngestionError(f"Missing dataset file: {path}", path=str(path))
        try:
            with open(path, "rb") as f:
                batch = pickle.load(f, encoding="bytes")
            data = np.asarray(batch[b"data"], dtype=np.uint8)
            labels = np.asarray(batch[b"labels"], dtype=np.int64)
        except (pickle.UnpicklingError, EOFError, KeyError, TypeError, ValueError) as e:
            raise IngestionError(
                f"Corrupt CIFAR10 batch {path}: {e}", path=str(path)
            ) from e
        if (
            data.ndim != 2
            or data.shape[1] != 3 * 32 * 32
            or data.shape[0] != labels.shape[0]
        ):
            raise IngestionError(f"Unexpected array shapes in {path}", path=str(path))
        all_images.append(data.reshape(-1, 3, 32, 32))
        all_labels.append(labels)

    images = np.concatenate(all_images).astype(np.float32) / 255.0
    return images, np.concatenate(all_labels)


def _load_image_folders(
    directory: Path, spec: DatasetSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class directories named by integer class id, resized bilinearly."""
    if not directory.is_dir():
        raise IngestionError(
            f"Missing dataset directory: {directory}", path=str(directory)
        )

    class_dirs = [d for d in directory.iterdir() if d.is_dir()]
    try:
        class_dirs.sort(key=lambda d: int(d.name))
    except ValueError as e:
        raise IngestionError(
            f"Class directories under {directory} must be named by integer class id",
            path=str(directory),
        ) from e

    images = []
    labels = []
    for class_dir in class_dirs:
        label = int(class_dir.name)
        if not 0 <= label < spec.num_classes:
            raise IngestionError(
                f"Class directory {class_dir} outside [0, {spec.num_classes})",
                path=str(class_dir),
            )
        files = sorted(
            p for p in class_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        for path in files:
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB").resize(
                        (spec.size, spec.size), Image.BILINEAR
                    )
                    array = np.asarray(img, dtype=np.float32) / 255.0
            except OSError as e:
                raise IngestionError(
                    f"Cannot decode image {path}: {e}", path=str(path)
                ) from e
            images.append(array.transpose(2, 0, 1))
            labels.append(label)

    if not images:
        raise IngestionError(f"No images found under {directory}", path=str(directory))
    return np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64)


def augment(
    batch: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator
) -> torch.Tensor:
    """Apply per-sample random crop / rotation / horizontal flip.

    All randomness is drawn from ``generator`` so the same seed reproduces
    the same output. The result has the input's shape and lies in [0, 1].
    """
    if policy.is_identity:
        return batch

    out = batch
    n, _, height, width = out.shape

    if policy.horizontal_flip:
        flip = torch.rand(n, generator=generator) < 0.5
        flip = flip.to(out.device)
        out = torch.where(flip[:, None, None, None], out.flip(-1), out)

    if policy.random_crop and policy.crop_padding > 0:
        pad = policy.crop_padding
        padded = F.pad(out, (pad, pad, pad, pad))
        offsets = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
        rows = (offsets[:, 0:1] + torch.arange(height)).to(out.device)
        cols = (offsets[:, 1:2] + torch.arange(width)).to(out.device)
        batch_index = torch.arange(n, device=out.device)[:, None, None]
        # gather per-sample windows: N x H x W x C -> N x C x H x W
        channels_last = padded.permute(0, 2, 3, 1)
        windows = channels_last[batch_index, rows[:, :, None], cols[:, None, :]]
        out = windows.permute(0, 3, 1, 2).contiguous()

    if policy.random_rotation and policy.max_degrees > 0:
        degrees = (torch.rand(n, generator=generator) * 2 - 1) * policy.max_degrees
        radians = (degrees * math.pi / 180.0).to(out.device, out.dtype)
        cos, sin = torch.cos(radians), torch.sin(radians)
        zeros = torch.zeros_like(cos)
        theta = torch.stack(
            [
                torch.stack([cos, -sin, zeros], dim=1),
                torch.stack([sin, cos, zeros], dim=1),
            ],
            dim=1,
        )
        grid = F.affine_grid(theta, list(out.shape), align_corners=False)
        out = F.grid_sample(
            out, grid, mode="bilinear", padding_mode="zeros", align_corners=False
        )

    return out.clamp(0.0, 1.0)


def make_loader(
    dataset: LabeledImageSet,
    batch_size: int,
    shuffle: bool,
    generator: Optional[torch.Generator] = None,
    num_workers: int = 0,
) -> DataLoader:
    """DataLoader over an in-memory set; shuffling draws from ``generator``."""
    return DataLoader(
        TensorDataset(dataset.images, dataset.labels),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=num_workers,
        worker_init_fn=seed_worker if num_workers > 0 else None,
        drop_last=False,
    )


def iterate_batches(
    dataset: LabeledImageSet, batch_size: int
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Sequential, deterministic (images, labels) batches."""
    for start in range(0, len(dataset), batch_size):
        stop = start + batch_size
        yield dataset.images[start:stop], dataset.labels[start:stop]
