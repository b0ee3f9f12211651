"""Tests for classifier, generator and training-state checkpoints."""

import shutil
import tempfile
import unittest
from pathlib import Path

import torch

from marksman.checkpoints import (
    load_classifier,
    load_generator,
    load_training_state,
    save_classifier,
    save_generator,
    save_training_state,
)
from marksman.exceptions import IngestionError
from marksman.networks import build_classifier, parameter_snapshot, same_state
from marksman.triggers import build_generator


class TestCheckpoints(unittest.TestCase):
    """Test saving and reloading models."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_classifier(self):
        """Test that a reloaded classifier has identical weights and metadata."""
        model = build_classifier("mnist_cnn", 10, (1, 28, 28), seed=3)
        path = save_classifier(
            self.temp_dir / "classifier.pt", model, extra={"seed": 3}
        )
        loaded, meta = load_classifier(path)
        self.assertTrue(same_state(loaded, parameter_snapshot(model)))
        self.assertEqual(meta["arch_id"], "mnist_cnn")
        self.assertEqual(meta["seed"], 3)

    def test_generator(self):
        """Test that a reloaded generator is in eval mode with the same output."""
        gen = build_generator(10, (1, 28, 28), 0.05, seed=1).eval()
        path = save_generator(self.temp_dir / "generator.pt", gen)
        loaded, meta = load_generator(path)
        self.assertFalse(loaded.training)
        self.assertEqual(meta["epsilon"], 0.05)
        images = torch.rand(2, 1, 28, 28)
        targets = torch.tensor([3, 7])
        with torch.no_grad():
            self.assertTrue(torch.equal(loaded(targets, images), gen(targets, images)))

    def test_training_state(self):
        """Test that optimizer and RNG states survive the round trip."""
        generator = torch.Generator().manual_seed(5)
        state = {
            "epoch": 2,
            "rng": generator.get_state(),
            "history": {"iterations": []},
        }
        path = save_training_state(self.temp_dir / "train_state.pt", state)
        loaded = load_training_state(path)
        self.assertEqual(loaded["epoch"], 2)
        self.assertTrue(torch.equal(loaded["rng"], state["rng"]))
        self.assertEqual(loaded["kind"], "train_state")

    def test_missing_or_wrong_kind(self):
        """Test errors for missing files and mixed-up checkpoints."""
        with self.assertRaises(IngestionError):
            load_classifier(self.temp_dir / "absent.pt")
        gen = build_generator(10, (1, 28, 28), 0.05, seed=1)
        path = save_generator(self.temp_dir / "generator.pt", gen)
        with self.assertRaises(IngestionError):
            load_classifier(path)

    def test_corrupt_file(self):
        """Test an unreadable checkpoint."""
        path = self.temp_dir / "classifier.pt"
        path.write_bytes(b"not a checkpoint")
        with self.assertRaises(IngestionError):
            load_classifier(path)


if __name__ == "__main__":
    unittest.main()
