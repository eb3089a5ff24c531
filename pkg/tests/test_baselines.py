"""
Tests unitaires pour les méthodes de référence (FedAvg, DENSE).
"""
import unittest

import numpy as np

from config.constants import Stage
from data.datagen import make_synthetic_dataset, partition_iid
from data.schemas import DistillConfig, GenLossWeights, LocalTrainingConfig, MetricsRecorder
from models.nnkit import build_classifier
from server.baselines import ae_logits, dense_distill, fedavg_aggregate, fedavg_rounds
from utils.exceptions import ArchitectureMismatchError, InvalidArgumentError


class TestFedAvgAggregate(unittest.TestCase):
    """Tests pour fedavg_aggregate."""

    def setUp(self):
        self.models = [build_classifier("mlp_small", 4, 3, seed=s) for s in range(3)]

    def test_weighted_average(self):
        """Paramètres moyennés avec les poids n_k / Σ n."""
        merged = fedavg_aggregate(self.models, [1, 1, 2])
        expected = 0.25 * self.models[0].parameters + 0.25 * self.models[1].parameters \
            + 0.5 * self.models[2].parameters
        np.testing.assert_allclose(merged.parameters, expected, atol=1e-12)

    def test_identical_models_fixed_point(self):
        """Moyenne de copies identiques : le modèle lui-même."""
        merged = fedavg_aggregate([self.models[0], self.models[0].clone()], [3, 7])
        np.testing.assert_allclose(merged.parameters, self.models[0].parameters, atol=1e-12)
        np.testing.assert_allclose(merged.buffers_vector(), self.models[0].buffers_vector(), atol=1e-12)

    def test_inputs_untouched(self):
        """Les modèles d'entrée ne sont pas modifiés."""
        before = self.models[0].parameters
        fedavg_aggregate(self.models, [5, 1, 1])
        np.testing.assert_array_equal(before, self.models[0].parameters)

    def test_architecture_mismatch(self):
        """Architectures différentes refusées."""
        with self.assertRaises(ArchitectureMismatchError):
            fedavg_aggregate([self.models[0], build_classifier("mlp_wide", 4, 3, seed=0)], [1, 1])

    def test_invalid_counts(self):
        """Effectifs nuls, négatifs ou en nombre incorrect refusés."""
        with self.assertRaises(InvalidArgumentError):
            fedavg_aggregate(self.models, [0, 0, 0])
        with self.assertRaises(InvalidArgumentError):
            fedavg_aggregate(self.models, [1, -1, 2])
        with self.assertRaises(InvalidArgumentError):
            fedavg_aggregate(self.models, [1, 1])
        with self.assertRaises(InvalidArgumentError):
            fedavg_aggregate([], [])


class TestAveragedLogits(unittest.TestCase):
    """Tests pour ae_logits."""

    def setUp(self):
        self.models = [build_classifier("mlp_small", 4, 3, seed=s) for s in range(3)]
        self.batch = np.random.default_rng(0).normal(size=(6, 4))

    def test_permutation_invariance(self):
        """L'ordre des clients ne change pas la moyenne."""
        a = ae_logits(self.models, self.batch).numpy()
        b = ae_logits(self.models[::-1], self.batch).numpy()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_mean_of_client_logits(self):
        """Moyenne exacte des logits individuels."""
        singles = [ae_logits([model], self.batch).numpy() for model in self.models]
        np.testing.assert_allclose(ae_logits(self.models, self.batch).numpy(), np.mean(singles, axis=0),
                                   atol=1e-12)

    def test_detached_from_clients(self):
        """Sortie détachée du graphe d'autograd des clients."""
        averaged = ae_logits(self.models, self.batch)
        self.assertFalse(averaged.requires_grad)

    def test_empty(self):
        """Liste vide refusée."""
        with self.assertRaises(InvalidArgumentError):
            ae_logits([], self.batch)


class TestBaselineRuns(unittest.TestCase):
    """Tests pour dense_distill et fedavg_rounds."""

    @classmethod
    def setUpClass(cls):
        cls.dataset = make_synthetic_dataset(3, 20, 4, 0.3, seed=0)
        cls.partition = partition_iid(cls.dataset, 3, seed=0)
        cls.local = LocalTrainingConfig(epochs=2, batch_size=8, lr=0.05)

    def test_dense_distill(self):
        """DENSE produit un modèle global de la bonne forme et un historique par époque."""
        clients = [build_classifier("mlp_small", 4, 3, seed=s) for s in range(3)]
        cfg = DistillConfig(global_epochs=2, generator_epochs=2, batch_size=8, noise_dim=4)
        result = dense_distill(clients, cfg, GenLossWeights(), seed=0, evaluator=lambda model: 0.25)
        self.assertEqual(result.global_model.n_outputs, 3)
        self.assertEqual(result.accuracy_trace, [0.25, 0.25])

    def test_fedavg_rounds(self):
        """Deux rounds : une durée et une précision par round."""
        recorder = MetricsRecorder("fedavg", 0)
        model = fedavg_rounds(self.partition, self.dataset, 2, self.local, seed=0, architecture="mlp_small",
                              evaluator=lambda m: 0.5, recorder=recorder)
        self.assertEqual(model.architecture_tag, "mlp_small")
        self.assertEqual([row.round for row in recorder.timings], [0, 1])
        self.assertEqual(sum(row.stage == Stage.ROUND.value for row in recorder.rows), 2)

    def test_fedavg_deterministic(self):
        """Même graine, même modèle moyenné."""
        a = fedavg_rounds(self.partition, self.dataset, 1, self.local, seed=3, architecture="mlp_small")
        b = fedavg_rounds(self.partition, self.dataset, 1, self.local, seed=3, architecture="mlp_small")
        np.testing.assert_array_equal(a.parameters, b.parameters)

    def test_fedavg_zero_rounds(self):
        """R = 0 refusé."""
        with self.assertRaises(InvalidArgumentError):
            fedavg_rounds(self.partition, self.dataset, 0, self.local, seed=0, architecture="mlp_small")


if __name__ == '__main__':
    unittest.main()
