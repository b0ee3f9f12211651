"""Tests for attack metrics, sweeps and transfer."""

import math
import unittest
from unittest.mock import patch

import pandas as pd
import torch

from marksman.config import TrainConfig
from marksman.evaluation import (
    METRIC_COLUMNS,
    NO_PREDICTION,
    all_target_asr,
    clean_accuracy,
    hyperparameter_sweep,
    per_class_asr,
    poison_rate_sweep,
    predict_labels,
    summarize_seeds,
    transfer_attack,
)
from marksman.exceptions import InputError, TrainingError
from marksman.models import Z_95
from marksman.networks import parameter_snapshot, same_state
from marksman.triggers import build_generator, build_patch_table, poison_batch

from .helpers import ConstantNet, TinyNet, synthetic_set


def tiny_config(**changes) -> TrainConfig:
    values = dict(
        batch_size=16, epochs=1, lr_milestones=[1], augment=False, poison_rate=0.25
    )
    values.update(changes)
    return TrainConfig(**values).validate()


class TestMetrics(unittest.TestCase):
    """Test clean accuracy and all-target attack success."""

    def setUp(self):
        self.testset = synthetic_set(n=8)
        self.table = build_patch_table(4, (1, 16, 16))

    def test_predict_labels_ties_go_low(self):
        """Test the tie-breaking rule."""
        logits = torch.tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0], [0.0, -1.0, 5.0]])
        self.assertEqual(predict_labels(logits).tolist(), [1, 0, 2])

    def test_nan_logits_are_misclassified(self):
        """Test that NaN logits yield no class and count as misses."""
        nan = float("nan")
        logits = torch.tensor([[nan, 1.0, 0.0], [0.0, 2.0, 1.0], [nan, nan, nan]])
        self.assertEqual(
            predict_labels(logits).tolist(), [NO_PREDICTION, 1, NO_PREDICTION]
        )

        classifier = ConstantNet([nan, 5.0, 0.0, 0.0])
        self.assertEqual(clean_accuracy(classifier, self.testset), 0.0)
        metrics = all_target_asr(classifier, self.table, self.testset)
        self.assertEqual(metrics.asr, 0.0)
        self.assertEqual(metrics.per_class_trials, [6, 6, 6, 6])

    def test_constant_classifier(self):
        """Test a classifier that always answers class 1."""
        classifier = ConstantNet([0.0, 5.0, 0.0, 0.0])
        self.assertAlmostEqual(clean_accuracy(classifier, self.testset), 0.25)

        metrics = all_target_asr(classifier, self.table, self.testset, batch_size=3)
        self.assertEqual(metrics.n_trials, 8 * 3)
        self.assertEqual(metrics.per_class_trials, [6, 6, 6, 6])
        self.assertEqual(metrics.per_class_asr, [0.0, 1.0, 0.0, 0.0])
        self.assertAlmostEqual(metrics.asr, 0.25)
        self.assertAlmostEqual(metrics.clean_accuracy, 0.25)
        self.assertEqual(
            per_class_asr(classifier, self.table, self.testset), metrics.per_class_asr
        )

    def test_tied_logits_predict_class_zero(self):
        """Test that an all-equal classifier predicts the lowest class."""
        classifier = ConstantNet([1.0, 1.0, 1.0, 1.0])
        metrics = all_target_asr(classifier, self.table, self.testset)
        self.assertEqual(metrics.per_class_asr, [1.0, 0.0, 0.0, 0.0])

    def test_matches_pairwise_enumeration(self):
        """Test against one forward pass per (sample, target) pair."""
        classifier = TinyNet().eval()
        gen = build_generator(4, (1, 16, 16), 0.3, seed=2).eval()
        metrics = all_target_asr(classifier, gen, self.testset, batch_size=5)

        hits, trials = [0] * 4, [0] * 4
        with torch.no_grad():
            for image, label in zip(self.testset.images, self.testset.labels.tolist()):
                for target in range(4):
                    if target == label:
                        continue
                    poisoned = poison_batch(gen, torch.tensor([target]), image[None])
                    trials[target] += 1
                    predicted = predict_labels(classifier(poisoned))[0]
                    hits[target] += int(predicted == target)

        self.assertEqual(metrics.per_class_trials, trials)
        self.assertEqual(metrics.n_trials, sum(trials))
        self.assertAlmostEqual(metrics.asr, sum(hits) / sum(trials))
        self.assertEqual(metrics.per_class_asr, [h / t for h, t in zip(hits, trials)])
        pairs = zip(metrics.per_class_asr, metrics.per_class_trials)
        weighted = sum(r * t for r, t in pairs) / metrics.n_trials
        self.assertAlmostEqual(weighted, metrics.asr)

    def test_models_untouched(self):
        """Test that evaluation changes neither parameters, buffers nor modes."""
        classifier = TinyNet().train()
        gen = build_generator(4, (1, 16, 16), 0.05, seed=0).train()
        classifier_state = parameter_snapshot(classifier)
        gen_state = parameter_snapshot(gen)

        metrics = all_target_asr(classifier, gen, self.testset)
        self.assertTrue(same_state(classifier, classifier_state))
        self.assertTrue(same_state(gen, gen_state))
        self.assertTrue(classifier.training)
        self.assertTrue(gen.training)
        self.assertGreaterEqual(metrics.asr, 0.0)
        self.assertLessEqual(metrics.asr, 1.0)

    def test_empty_test_set(self):
        """Test that empty sets are rejected."""
        empty = self.testset.head(0)
        with self.assertRaises(InputError):
            clean_accuracy(TinyNet(), empty)
        with self.assertRaises(InputError):
            all_target_asr(TinyNet(), self.table, empty)


class TestSweeps(unittest.TestCase):
    """Test the sweep drivers."""

    def setUp(self):
        self.trainset = synthetic_set(n=32)
        self.testset = synthetic_set(n=8, seed=1)

    def test_poison_rate_sweep_trains_each_rate(self):
        """Test one row per rate with the metric columns."""
        frame = poison_rate_sweep(
            tiny_config(), [0.0, 0.5], self.trainset, self.testset
        )
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(frame["rate"].tolist(), [0.0, 0.5])
        self.assertTrue((frame["n_trials"] == 24).all())
        self.assertTrue(frame["clean"].between(0, 1).all())

    def test_benign_sweep_has_no_asr(self):
        """Test that benign rows carry NaN attack success."""
        frame = poison_rate_sweep(
            tiny_config(), [0.0], self.trainset, self.testset, method="benign"
        )
        self.assertTrue(math.isnan(frame["asr"].iloc[0]))
        self.assertEqual(int(frame["n_trials"].iloc[0]), 0)

    @patch("marksman.evaluation._train_and_score")
    def test_divergence_names_the_rate(self, mock_train):
        """Test that a diverged run reports its rate and iteration."""
        mock_train.side_effect = [
            {"clean": 0.5, "asr": 0.5, "n_trials": 24},
            TrainingError("non-finite loss", iteration=5),
        ]
        with self.assertRaises(TrainingError) as ctx:
            poison_rate_sweep(tiny_config(), [0.1, 0.5], self.trainset, self.testset)
        self.assertIn("poison_rate=0.5", str(ctx.exception))
        self.assertEqual(ctx.exception.iteration, 5)

    @patch("marksman.evaluation._train_and_score")
    def test_hyperparameter_grid(self, mock_train):
        """Test alpha varied with beta fixed, then beta varied with alpha fixed."""
        mock_train.return_value = {"clean": 0.9, "asr": 0.8, "n_trials": 24}
        frame = hyperparameter_sweep(
            tiny_config(),
            [0.2, 0.5],
            [0.0],
            self.trainset,
            self.testset,
            fixed_alpha=0.8,
            fixed_beta=1.0,
        )
        self.assertEqual(frame["varied"].tolist(), ["alpha", "alpha", "beta"])
        self.assertEqual(frame["alpha"].tolist(), [0.2, 0.5, 0.8])
        self.assertEqual(frame["beta"].tolist(), [1.0, 1.0, 0.0])
        configs = [call.args[3] for call in mock_train.call_args_list]
        self.assertEqual(
            [(c.alpha, c.beta) for c in configs],
            [(0.2, 1.0), (0.5, 1.0), (0.8, 0.0)],
        )

    def test_transfer_keeps_generator_frozen(self):
        """Test that transfer trains a new architecture and keeps the generator."""
        gen = build_generator(4, (1, 16, 16), 0.05, seed=0)
        before = parameter_snapshot(gen)
        metrics = transfer_attack(
            gen, "small_conv_alt", self.trainset, self.testset, tiny_config(), seed=7
        )
        self.assertTrue(same_state(gen, before))
        self.assertEqual(metrics.n_trials, 24)


class TestSummarizeSeeds(unittest.TestCase):
    """Test the across-seed summary."""

    def test_mean_std_interval(self):
        """Test the sample std and normal 95% interval, skipping NaN."""
        rows = [
            {"clean": 0.9, "asr": float("nan")},
            {"clean": 0.8, "asr": float("nan")},
        ]
        summary = summarize_seeds(rows)
        self.assertNotIn("asr", summary)
        clean = summary["clean"]
        self.assertEqual(clean.n, 2)
        self.assertAlmostEqual(clean.mean, 0.85)
        self.assertAlmostEqual(clean.std, math.sqrt(0.005))
        half_width = Z_95 * math.sqrt(0.005) / math.sqrt(2)
        self.assertAlmostEqual(clean.ci_high - clean.mean, half_width)

    def test_single_seed(self):
        """Test zero spread for one seed."""
        summary = summarize_seeds(pd.DataFrame({"clean": [0.7], "asr": [0.95]}))
        self.assertEqual(summary["asr"].std, 0.0)
        self.assertEqual(summary["asr"].ci_low, 0.95)


if __name__ == "__main__":
    unittest.main()
