"""Tests for Neural Cleanse, STRIP, spectral signatures and fine-pruning."""

import math
import unittest

import torch

from marksman.config import DefenseOptions, NeuralCleanseOptions
from marksman.defenses import (
    MAD_CONSISTENCY,
    anomaly_index,
    fine_pruning,
    make_backdoor_samples,
    neural_cleanse,
    prune_channels,
    run_defense_suite,
    spectral_scores,
    spectral_signature,
    strip_auroc,
    strip_entropy,
)
from marksman.evaluation import clean_accuracy
from marksman.exceptions import ConfigurationError, InputError
from marksman.networks import parameter_snapshot, penultimate_features, same_state
from marksman.triggers import build_generator
from marksman.utils import make_generator

from .helpers import ConstantNet, TinyNet, synthetic_set


class TestNeuralCleanse(unittest.TestCase):
    """Test trigger reverse-engineering and the anomaly index."""

    def test_anomaly_index(self):
        """Test the MAD outlier score of the smallest norm."""
        self.assertAlmostEqual(anomaly_index([1, 2, 3, 4, 10]), 2 / MAD_CONSISTENCY)
        self.assertAlmostEqual(anomaly_index([10, 10, 10, 10, 1]), 0.0)
        self.assertEqual(anomaly_index([5.0, 5.0, 5.0]), 0.0)
        with self.assertRaises(InputError):
            anomaly_index([])

    def test_constant_classifier_converges_for_its_class_only(self):
        """Test that only the always-predicted class reaches the attack threshold."""
        classifier = ConstantNet([0.0, 5.0, 0.0])
        clean = synthetic_set(n=6, num_classes=3)
        options = NeuralCleanseOptions(epochs=3, batch_size=6, patience=1)
        result, triggers = neural_cleanse(classifier, clean, options, seed=0)

        self.assertEqual(result.converged, [False, True, False])
        self.assertEqual(len(result.norms), 3)
        self.assertEqual([t.target for t in triggers], [0, 1, 2])
        self.assertEqual(triggers[1].mask.shape, (1, 16, 16))
        self.assertEqual(triggers[1].pattern.shape, (1, 16, 16))
        self.assertTrue(all(0 <= n <= 256 for n in result.norms))
        self.assertGreaterEqual(result.anomaly_index, 0.0)

    def test_classifier_untouched(self):
        """Test that reverse engineering leaves the model and its gradients alone."""
        classifier = TinyNet()
        before = parameter_snapshot(classifier)
        options = NeuralCleanseOptions(epochs=2, batch_size=4)
        neural_cleanse(classifier, synthetic_set(n=8), options, seed=1)
        self.assertTrue(same_state(classifier, before))
        self.assertTrue(all(p.grad is None for p in classifier.parameters()))
        self.assertTrue(classifier.training)

    def test_seeded(self):
        """Test one seed, one result."""
        classifier = TinyNet()
        clean = synthetic_set(n=8)
        options = NeuralCleanseOptions(epochs=2, batch_size=4)
        a, _ = neural_cleanse(classifier, clean, options, seed=3)
        b, _ = neural_cleanse(classifier, clean, options, seed=3)
        self.assertEqual(a.norms, b.norms)

    def test_empty_clean_set(self):
        """Test that clean samples are required."""
        with self.assertRaises(InputError):
            neural_cleanse(TinyNet(), synthetic_set(n=4).head(0))


class TestStrip(unittest.TestCase):
    """Test perturbation entropy and its AUROC."""

    def setUp(self):
        data = synthetic_set(n=8)
        self.queries = data.images[:4]
        self.overlays = data.images[4:]

    def test_uniform_prediction_has_max_entropy(self):
        """Test entropy ln(C) for a classifier with equal logits."""
        classifier = ConstantNet([0.0] * 4)
        entropy = strip_entropy(classifier, self.queries, self.overlays, n_perturb=5)
        self.assertEqual(entropy.shape, (4,))
        expected = torch.full((4,), math.log(4), dtype=torch.float64)
        self.assertTrue(torch.allclose(entropy, expected))

    def test_confident_prediction_has_zero_entropy(self):
        """Test that saturated probabilities give entropy near 0 and never negative."""
        classifier = ConstantNet([0.0, 200.0, 0.0, 0.0])
        entropy = strip_entropy(classifier, self.queries, self.overlays, n_perturb=3)
        self.assertTrue(bool((entropy >= 0).all()))
        self.assertLess(float(entropy.max()), 1e-6)

    def test_chunking_does_not_change_result(self):
        """Test chunked evaluation against one pass with the same overlay draws."""
        classifier = TinyNet()
        a = strip_entropy(
            classifier, self.queries, self.overlays, 6, generator=make_generator(0)
        )
        b = strip_entropy(
            classifier,
            self.queries,
            self.overlays,
            6,
            generator=make_generator(0),
            chunk_size=6,
        )
        self.assertTrue(torch.allclose(a, b))

    def test_invalid_arguments(self):
        """Test empty overlays and a zero perturbation count."""
        with self.assertRaises(InputError):
            strip_entropy(TinyNet(), self.queries, self.overlays[:0])
        with self.assertRaises(ConfigurationError):
            strip_entropy(TinyNet(), self.queries, self.overlays, n_perturb=0)

    def test_auroc(self):
        """Test that low backdoor entropies are detected."""
        self.assertEqual(strip_auroc([1.2, 1.3, 1.1], [0.1, 0.2]), 1.0)
        self.assertEqual(strip_auroc([0.1, 0.2], [1.2, 1.3, 1.1]), 0.0)
        self.assertEqual(strip_auroc([0.5, 0.5], [0.5]), 0.5)
        with self.assertRaises(InputError):
            strip_auroc([], [0.1])


class TestSpectralSignature(unittest.TestCase):
    """Test spectral-signature outlier scores."""

    def test_scores_on_known_features(self):
        """Test squared projections on the top singular direction."""
        features = torch.tensor(
            [[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]], dtype=torch.float64
        )
        scores = spectral_scores(features, features)
        expected = torch.tensor([1.0, 1.0, 4.0, 4.0], dtype=torch.float64)
        self.assertTrue(torch.allclose(scores, expected))

    def test_zero_variance(self):
        """Test that identical features score 0."""
        features = torch.ones(5, 3, dtype=torch.float64)
        self.assertTrue(bool((spectral_scores(features, features) == 0).all()))

    def test_signature_result(self):
        """Test score and flag layout, with and without per-class scoring."""
        classifier = TinyNet()
        clean = synthetic_set(n=12)
        backdoor = synthetic_set(n=5, seed=2).images
        targets = torch.tensor([0, 1, 2, 3, 0])

        result = spectral_signature(classifier, clean, backdoor, bins=4)
        self.assertEqual(len(result.scores), 17)
        self.assertEqual(result.is_backdoor, [False] * 12 + [True] * 5)
        self.assertEqual(len(result.bin_edges), 5)
        self.assertTrue(all(s >= 0 for s in result.scores))

        per_class = spectral_signature(
            classifier, clean, backdoor, targets, per_class=True
        )
        self.assertEqual(len(per_class.scores), 17)
        with self.assertRaises(InputError):
            spectral_signature(classifier, clean, backdoor, per_class=True)

    def test_empty_inputs(self):
        """Test missing clean or backdoor samples."""
        with self.assertRaises(InputError):
            spectral_signature(TinyNet(), synthetic_set(n=4), torch.zeros(0, 1, 16, 16))


class TestFinePruning(unittest.TestCase):
    """Test channel pruning and the pruning curve."""

    def setUp(self):
        torch.manual_seed(0)
        self.classifier = TinyNet(width=6)
        self.clean = synthetic_set(n=12)
        self.testset = synthetic_set(n=8, seed=1)

    def test_prune_channels_zeroes_only_listed_channels(self):
        """Test the masked copy and the untouched original."""
        pruned = prune_channels(self.classifier, [1, 4])
        with torch.no_grad():
            features = penultimate_features(pruned, self.clean.images)
            original = penultimate_features(self.classifier, self.clean.images)
        self.assertTrue(bool((features[:, [1, 4]] == 0).all()))
        kept = [0, 2, 3, 5]
        self.assertTrue(torch.equal(features[:, kept], original[:, kept]))
        self.assertEqual(len(self.classifier.last_conv_activation._forward_hooks), 0)

    def test_curve(self):
        """Test channel counts per ratio; without a trigger the ASR is NaN."""
        curve = fine_pruning(
            self.classifier, self.clean, None, self.testset, [0.0, 0.5, 1.0]
        )
        self.assertEqual([p.pruned_channels for p in curve], [0, 3, 6])
        self.assertAlmostEqual(
            curve[0].clean_accuracy, clean_accuracy(self.classifier, self.testset)
        )
        self.assertTrue(all(math.isnan(p.asr) for p in curve))

    def test_curve_with_trigger(self):
        """Test that ASR is reported for every ratio."""
        gen = build_generator(4, (1, 16, 16), 0.05, seed=0)
        curve = fine_pruning(self.classifier, self.clean, gen, self.testset, [0.0, 0.3])
        self.assertEqual([p.pruned_channels for p in curve], [0, 1])
        self.assertTrue(all(0.0 <= p.asr <= 1.0 for p in curve))

    def test_pruning_dead_channel_keeps_accuracy(self):
        """Test that removing a channel that never fires changes nothing."""
        with torch.no_grad():
            self.classifier.conv.weight[0].zero_()
            self.classifier.conv.bias[0] = -1.0
        curve = fine_pruning(
            self.classifier, self.clean, None, self.testset, [0.0, 1.0 / 6]
        )
        self.assertEqual(curve[1].pruned_channels, 1)
        self.assertEqual(curve[1].clean_accuracy, curve[0].clean_accuracy)

        pruned = prune_channels(self.classifier, [0])
        with torch.no_grad():
            expected = self.classifier(self.testset.images)
            self.assertTrue(torch.equal(pruned(self.testset.images), expected))

    def test_invalid_ratios(self):
        """Test ratio validation."""
        for ratios in ([], [0.1, 0.2], [0.0, 0.5, 0.2], [0.0, 1.5]):
            with self.subTest(ratios=ratios):
                with self.assertRaises(ConfigurationError):
                    fine_pruning(
                        self.classifier, self.clean, None, self.testset, ratios
                    )


class TestDefenseSuite(unittest.TestCase):
    """Test the combined defense run."""

    def setUp(self):
        self.options = DefenseOptions.from_dict(
            {
                "clean_samples": 8,
                "backdoor_samples": 6,
                "neural_cleanse": {"epochs": 2, "batch_size": 8},
                "strip": {"n_perturb": 3, "queries": 4},
                "spectral": {"bins": 5},
                "fine_pruning": {"ratios": [0.0, 0.5]},
            }
        ).validate()
        self.classifier = TinyNet()
        self.pool = synthetic_set(n=16)
        self.testset = synthetic_set(n=8, seed=1)

    def test_backdoor_samples(self):
        """Test poisoned samples and their targets."""
        gen = build_generator(4, (1, 16, 16), 0.05, seed=0)
        images, targets = make_backdoor_samples(gen, self.testset, 5, seed=0)
        self.assertEqual(images.shape, (5, 1, 16, 16))
        self.assertFalse(bool((targets == self.testset.labels[:5]).any()))
        residual = (images - self.testset.images[:5]).abs().max()
        self.assertLessEqual(float(residual), 0.05 + 1e-6)

    def test_attacked_model(self):
        """Test that all four defenses report."""
        gen = build_generator(4, (1, 16, 16), 0.05, seed=0)
        report = run_defense_suite(
            self.classifier, gen, self.pool, self.testset, self.options
        )
        self.assertEqual(len(report.neural_cleanse.norms), 4)
        self.assertEqual(len(report.strip.clean_entropies), 4)
        self.assertEqual(len(report.strip.backdoor_entropies), 4)
        self.assertTrue(0.0 <= report.strip.auroc <= 1.0)
        self.assertEqual(len(report.spectral.scores), 8 + 6)
        self.assertEqual([p.ratio for p in report.pruning_curve], [0.0, 0.5])

    def test_benign_model(self):
        """Test that trigger-dependent defenses are skipped with a warning."""
        report = run_defense_suite(
            self.classifier, None, self.pool, self.testset, self.options
        )
        self.assertIsNone(report.strip)
        self.assertIsNone(report.spectral)
        self.assertIn("strip, spectral: skipped, model has no trigger", report.warnings)
        self.assertTrue(math.isnan(report.pruning_curve[-1].asr))


if __name__ == "__main__":
    unittest.main()
