"""Tests for dataset ingestion, augmentation and batching."""

import gzip
import pickle
import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from marksman.datasets import (
    AugmentPolicy,
    LabeledImageSet,
    augment,
    get_dataset_spec,
    iterate_batches,
    load_dataset,
    make_loader,
)
from marksman.exceptions import ConfigurationError, InputError, IngestionError
from marksman.utils import make_generator

from .helpers import synthetic_set


def _write_idx(path: Path, array: np.ndarray, compress: bool = False):
    dims = struct.pack(f">{array.ndim}I", *array.shape)
    header = bytes([0, 0, 0x08, array.ndim]) + dims
    payload = header + array.astype(np.uint8).tobytes()
    if compress:
        with gzip.open(path.with_name(path.name + ".gz"), "wb") as f:
            f.write(payload)
    else:
        path.write_bytes(payload)


class TestLabeledImageSet(unittest.TestCase):
    """Test the in-memory dataset container."""

    def test_validation(self):
        """Test shape, pixel-range and label-range checks."""
        two, three = torch.zeros(2, dtype=torch.long), torch.zeros(3, dtype=torch.long)
        with self.assertRaises(InputError):
            LabeledImageSet(torch.zeros(2, 16, 16), two, 4, "x")
        with self.assertRaises(InputError):
            LabeledImageSet(torch.zeros(2, 1, 4, 4), three, 4, "x")
        with self.assertRaises(InputError):
            LabeledImageSet(torch.full((2, 1, 4, 4), 1.5), two, 4, "x")
        with self.assertRaises(InputError):
            LabeledImageSet(torch.zeros(2, 1, 4, 4), torch.tensor([0, 4]), 4, "x")

    def test_subset_head_split(self):
        """Test ordered slicing helpers."""
        data = synthetic_set(n=10)
        self.assertEqual(len(data), 10)
        self.assertEqual(data.image_shape, (1, 16, 16))
        self.assertIs(data.head(None), data)
        self.assertIs(data.head(20), data)
        self.assertEqual(data.head(3).labels.tolist(), [0, 1, 2])

        first, rest = data.split(4)
        self.assertEqual(len(first), 4)
        self.assertEqual(len(rest), 6)
        self.assertTrue(torch.equal(rest.images[0], data.images[4]))

        picked = data.subset([5, 1])
        self.assertEqual(picked.labels.tolist(), [1, 1])


class TestLoadDataset(unittest.TestCase):
    """Test reading the standard distribution formats from disk."""

    def setUp(self):
        self.root = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.root, ignore_errors=True)

    def _write_mnist(self, compress: bool):
        directory = self.root / "mnist"
        directory.mkdir()
        rng = np.random.default_rng(0)
        for images_name, labels_name, n in [
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 6),
            ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 4),
        ]:
            pixels = rng.integers(0, 256, (n, 28, 28))
            _write_idx(directory / images_name, pixels, compress)
            _write_idx(directory / labels_name, np.arange(n) % 10, compress)

    def test_mnist_raw(self):
        """Test uncompressed IDX files."""
        self._write_mnist(compress=False)
        train = load_dataset("mnist", "train", self.root)
        self.assertEqual(train.images.shape, (6, 1, 28, 28))
        self.assertEqual(train.images.dtype, torch.float32)
        self.assertLessEqual(float(train.images.max()), 1.0)
        self.assertEqual(train.labels.tolist(), [0, 1, 2, 3, 4, 5])
        self.assertEqual(train.num_classes, 10)

    def test_mnist_gzip(self):
        """Test gzipped IDX files are read transparently."""
        self._write_mnist(compress=True)
        test = load_dataset("mnist", "test", self.root)
        self.assertEqual(len(test), 4)

    def test_mnist_truncated(self):
        """Test a short payload is rejected."""
        self._write_mnist(compress=False)
        path = self.root / "mnist" / "t10k-images-idx3-ubyte"
        path.write_bytes(path.read_bytes()[:-10])
        with self.assertRaises(IngestionError):
            load_dataset("mnist", "test", self.root)

    def test_mnist_missing(self):
        """Test missing files name the path."""
        with self.assertRaises(IngestionError) as ctx:
            load_dataset("mnist", "train", self.root)
        self.assertIn("train-images-idx3-ubyte", ctx.exception.path)

    def test_cifar10_batches(self):
        """Test pickled CIFAR10 batches."""
        directory = self.root / "cifar-10-batches-py"
        directory.mkdir()
        rng = np.random.default_rng(0)
        data = rng.integers(0, 256, (5, 3072)).astype(np.uint8)
        with open(directory / "test_batch", "wb") as f:
            pickle.dump({b"data": data, b"labels": [0, 1, 2, 3, 9]}, f)

        test = load_dataset("cifar10", "test", self.root)
        self.assertEqual(test.images.shape, (5, 3, 32, 32))
        first = test.images[0, :, 0, 0]
        self.assertAlmostEqual(float(first[0]), data[0, 0] / 255.0, places=6)
        self.assertAlmostEqual(float(first[1]), data[0, 1024] / 255.0, places=6)
        self.assertEqual(test.labels.tolist(), [0, 1, 2, 3, 9])

    def test_cifar10_corrupt(self):
        """Test a batch with missing keys."""
        directory = self.root / "cifar-10-batches-py"
        directory.mkdir()
        with open(directory / "test_batch", "wb") as f:
            pickle.dump({b"other": 1}, f)
        with self.assertRaises(IngestionError):
            load_dataset("cifar10", "test", self.root)

    def test_gtsrb_folders(self):
        """Test per-class image folders, resized to 32x32 and ordered by class id."""
        for class_id, colour in [(10, (255, 0, 0)), (2, (0, 255, 0))]:
            folder = self.root / "gtsrb" / "train" / str(class_id)
            folder.mkdir(parents=True)
            for i in range(2):
                Image.new("RGB", (40, 45), colour).save(folder / f"{i:05d}.png")

        train = load_dataset("gtsrb", "train", self.root)
        self.assertEqual(train.images.shape, (4, 3, 32, 32))
        self.assertEqual(train.labels.tolist(), [2, 2, 10, 10])
        self.assertEqual(train.num_classes, 43)
        self.assertAlmostEqual(float(train.images[0, 1].mean()), 1.0, places=5)

    def test_gtsrb_bad_folder_name(self):
        """Test non-numeric class folders."""
        (self.root / "gtsrb" / "train" / "stop").mkdir(parents=True)
        with self.assertRaises(IngestionError):
            load_dataset("gtsrb", "train", self.root)

    def test_unknown_dataset_and_split(self):
        """Test configuration errors."""
        with self.assertRaises(ConfigurationError):
            load_dataset("imagenet", "train", self.root)
        with self.assertRaises(ConfigurationError):
            load_dataset("mnist", "valid", self.root)
        self.assertEqual(get_dataset_spec("GTSRB").num_classes, 43)


class TestAugmentation(unittest.TestCase):
    """Test seeded augmentation."""

    def setUp(self):
        self.batch = synthetic_set(n=8, channels=3).images

    def test_identity_policy(self):
        """Test that an identity policy returns the batch unchanged."""
        out = augment(self.batch, AugmentPolicy.identity(), make_generator(0))
        self.assertIs(out, self.batch)

    def test_seeded_and_bounded(self):
        """Test determinism per seed, shape and range."""
        policy = AugmentPolicy.for_dataset("cifar10")
        a = augment(self.batch, policy, make_generator(3))
        b = augment(self.batch, policy, make_generator(3))
        c = augment(self.batch, policy, make_generator(4))
        self.assertTrue(torch.equal(a, b))
        self.assertFalse(torch.equal(a, c))
        self.assertEqual(a.shape, self.batch.shape)
        self.assertGreaterEqual(float(a.min()), 0.0)
        self.assertLessEqual(float(a.max()), 1.0)

    def test_mnist_policy_has_no_flip(self):
        """Test per-dataset policies."""
        self.assertFalse(AugmentPolicy.for_dataset("mnist").horizontal_flip)
        self.assertTrue(AugmentPolicy.for_dataset("gtsrb").horizontal_flip)

    def test_flip_only(self):
        """Test that a flip-only policy either keeps or mirrors each sample."""
        policy = AugmentPolicy(horizontal_flip=True)
        out = augment(self.batch, policy, make_generator(0))
        for original, result in zip(self.batch, out):
            flipped = original.flip(-1)
            self.assertTrue(
                torch.equal(result, original) or torch.equal(result, flipped)
            )


class TestBatching(unittest.TestCase):
    """Test loaders and sequential batches."""

    def test_iterate_batches_covers_in_order(self):
        """Test the last partial batch and ordering."""
        data = synthetic_set(n=10)
        batches = list(iterate_batches(data, 4))
        self.assertEqual([len(y) for _, y in batches], [4, 4, 2])
        self.assertTrue(torch.equal(torch.cat([y for _, y in batches]), data.labels))

    def test_loader_shuffle_is_seeded(self):
        """Test that the shuffle order follows the generator."""
        data = synthetic_set(n=20)

        def order(seed):
            loader = make_loader(data, 5, shuffle=True, generator=make_generator(seed))
            return torch.cat([y for _, y in loader]).tolist()

        self.assertEqual(order(1), order(1))
        self.assertEqual(sorted(order(1)), sorted(data.labels.tolist()))


if __name__ == "__main__":
    unittest.main()
