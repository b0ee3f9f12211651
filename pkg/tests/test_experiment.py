"""Tests for the experiment runner and its manifest."""

import math
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import pandas as pd
import torch

from marksman.config import config_from_dict
from marksman.evaluation import METRIC_COLUMNS
from marksman.exceptions import ConfigurationError
from marksman.experiment import MANIFEST_NAME, ExperimentRunner, run_experiment
from marksman.models import RunManifest

from .helpers import synthetic_set

TRAIN = synthetic_set(n=32, num_classes=10, size=28)
TEST = synthetic_set(n=12, num_classes=10, size=28, seed=1)


def fake_load_dataset(name, split, root):
    return TRAIN if split == "train" else TEST


def experiment_config(output_dir: Path, **sections):
    data = {
        "output_dir": str(output_dir),
        "device": "cpu",
        "seeds": [0, 1],
        "train": {
            "batch_size": 16,
            "epochs": 1,
            "lr_milestones": [1],
            "augment": False,
            "probe_size": 8,
            "poison_rate": 0.25,
        },
        "defenses": {
            "clean_samples": 8,
            "backdoor_samples": 4,
            "neural_cleanse": {"epochs": 1, "batch_size": 8},
            "strip": {"n_perturb": 2, "queries": 4},
            "fine_pruning": {"ratios": [0.0, 0.5]},
        },
        "sweep": {"poison_rates": [0.0, 0.5], "alphas": [0.5], "betas": []},
        "transfer": {"archs": ["mnist_cnn"]},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            data[key] = {**data.get(key, {}), **value}
        else:
            data[key] = value
    return config_from_dict(data, dataset="mnist")


@patch("marksman.experiment.load_dataset", side_effect=fake_load_dataset)
class TestExperimentRunner(unittest.TestCase):
    """Test ExperimentRunner class."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.output_dir = self.temp_dir / "exp"

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_train_and_evaluate(self, _mock_load):
        """Test run directories, metric tables and the manifest."""
        config = experiment_config(self.output_dir)
        manifest = run_experiment(config, show_progress=False)

        self.assertTrue(manifest.succeeded)
        self.assertIsNotNone(manifest.finished_at)
        self.assertEqual([r.status for r in manifest.runs], ["completed", "completed"])
        self.assertEqual(manifest.verify(self.output_dir), [])
        self.assertIn("clean", manifest.summaries)
        self.assertEqual(manifest.summaries["clean"].n, 2)

        run_dir = self.output_dir / "marksman_mnist_seed0"
        for name in (
            "classifier.pt",
            "generator.pt",
            "train_state.pt",
            "history.csv",
            "epochs.jsonl",
            "metrics.csv",
            "per_class.csv",
            "samples.pt",
        ):
            self.assertTrue((run_dir / name).exists(), name)
        self.assertFalse((run_dir / "defense_report.json").exists())

        metrics = pd.read_csv(run_dir / "metrics.csv")
        self.assertEqual(list(metrics.columns), METRIC_COLUMNS)
        self.assertEqual(int(metrics["n_trials"].iloc[0]), 12 * 9)
        self.assertEqual(float(metrics["rate"].iloc[0]), 0.25)

        samples = torch.load(run_dir / "samples.pt")
        self.assertEqual(samples["backdoor"].shape, (8, 1, 28, 28))
        self.assertTrue((self.output_dir / "config.yaml").exists())

        loaded = RunManifest.load(self.output_dir / MANIFEST_NAME)
        self.assertEqual(loaded.config_hash, manifest.config_hash)
        self.assertEqual(len(loaded.files), len(manifest.files))

    def test_defenses_enabled(self, _mock_load):
        """Test that enabling defenses writes the report files."""
        config = experiment_config(
            self.output_dir, seeds=[0], defenses={"enabled": True}
        )
        manifest = run_experiment(config, show_progress=False)

        run_dir = self.output_dir / "marksman_mnist_seed0"
        for name in (
            "defense_report.json",
            "nc_norms.csv",
            "strip_entropies.csv",
            "spectral_scores.csv",
            "pruning_curve.csv",
        ):
            self.assertTrue((run_dir / name).exists(), name)
        defense = manifest.runs[0].defense
        self.assertGreaterEqual(defense["anomaly_index"], 0.0)
        self.assertTrue(0.0 <= defense["strip_auroc"] <= 1.0)

    def test_benign_run(self, _mock_load):
        """Test that benign runs have no generator and NaN attack success."""
        config = experiment_config(self.output_dir, seeds=[0], method="benign")
        run_experiment(config, show_progress=False)

        run_dir = self.output_dir / "benign_mnist_seed0"
        self.assertFalse((run_dir / "generator.pt").exists())
        self.assertFalse((run_dir / "per_class.csv").exists())
        metrics = pd.read_csv(run_dir / "metrics.csv")
        self.assertTrue(math.isnan(metrics["asr"].iloc[0]))
        self.assertEqual(float(metrics["rate"].iloc[0]), 0.0)

    def test_stage_failure_is_recorded(self, _mock_load):
        """Test that a failing defense keeps earlier outputs and marks the run."""
        config = experiment_config(
            self.output_dir, seeds=[0], defenses={"enabled": True}
        )
        with patch(
            "marksman.experiment.run_defense_suite",
            side_effect=RuntimeError("out of memory"),
        ):
            manifest = run_experiment(config, show_progress=False)

        self.assertFalse(manifest.succeeded)
        self.assertEqual(manifest.failures[0].stage, "defend")
        self.assertIn("out of memory", manifest.failures[0].message)
        self.assertEqual(manifest.runs[0].status, "failed:defend")
        run_dir = self.output_dir / "marksman_mnist_seed0"
        self.assertTrue((run_dir / "metrics.csv").exists())

        on_disk = RunManifest.load(self.output_dir / MANIFEST_NAME)
        self.assertEqual(on_disk.failures[0].run, "marksman_mnist_seed0")

    def test_later_stages_reuse_checkpoints(self, _mock_load):
        """Test evaluate and defend on a finished training run."""
        config = experiment_config(self.output_dir, seeds=[0])
        run_experiment(config, show_progress=False)

        with ExperimentRunner(config, show_progress=False) as runner:
            manifest = runner.run(("evaluate", "defend"))
        self.assertTrue(manifest.succeeded)
        self.assertEqual(manifest.runs[0].status, "completed")
        run_dir = self.output_dir / "marksman_mnist_seed0"
        self.assertTrue((run_dir / "defense_report.json").exists())

    def test_missing_checkpoint_fails_stage(self, _mock_load):
        """Test evaluating without a trained model."""
        config = experiment_config(self.output_dir, seeds=[0])
        with ExperimentRunner(config, show_progress=False) as runner:
            manifest = runner.run(("evaluate",))
        self.assertEqual(manifest.failures[0].stage, "evaluate")
        self.assertIn("classifier.pt", manifest.failures[0].message)

    def test_resume_refuses_other_config(self, _mock_load):
        """Test the config-hash check on an existing experiment directory."""
        with ExperimentRunner(experiment_config(self.output_dir), show_progress=False):
            pass
        other = experiment_config(self.output_dir, train={"alpha": 0.3})
        with self.assertRaises(ConfigurationError):
            ExperimentRunner(other, show_progress=False)
        runner = ExperimentRunner(other, resume=False, show_progress=False)
        self.assertIsNone(runner.manifest.get_run("marksman_mnist_seed0"))

    def test_sweep(self, _mock_load):
        """Test the rate sweep followed by the alpha sweep."""
        config = experiment_config(self.output_dir, seeds=[0])
        with ExperimentRunner(config, show_progress=False) as runner:
            frame = runner.sweep()
        self.assertEqual(len(frame), 3)
        self.assertEqual(frame["rate"].tolist()[:2], [0.0, 0.5])
        self.assertEqual(frame["varied"].tolist()[2], "alpha")
        self.assertTrue((self.output_dir / "sweep.csv").exists())

    def test_transfer(self, _mock_load):
        """Test transfer after training, and its refusal for benign runs."""
        config = experiment_config(self.output_dir, seeds=[0])
        run_experiment(config, show_progress=False)
        with ExperimentRunner(config, show_progress=False) as runner:
            frame = runner.transfer()
        self.assertEqual(frame["arch"].tolist(), ["mnist_cnn"])
        self.assertEqual(frame["source_seed"].tolist(), [0])
        self.assertTrue((self.output_dir / "transfer.csv").exists())

        benign = experiment_config(self.temp_dir / "benign", seeds=[0], method="benign")
        with ExperimentRunner(benign, show_progress=False) as runner:
            self.assertIsNone(runner.transfer())
            self.assertEqual(runner.manifest.failures[0].stage, "transfer")


if __name__ == "__main__":
    unittest.main()
