"""
Tests unitaires pour l'agrégation stratifiée.
"""
import unittest

import numpy as np
import torch

from data.schemas import CapabilityMatrices, LogitBatch
from server.sagg import (
    AveragingEnsembler, StratifiedEnsembler, hard_labels, in_model_weight, stratified_aggregate
)
from server.stratify import normalize_capabilities
from utils.exceptions import LabelOutOfRangeError, ShapeMismatchError


def loop_aggregate(logits, labels, caps):
    """Calcul de référence par triple boucle."""
    b, c = logits[0].shape
    out = np.zeros((b, c))
    for i in range(b):
        for j in range(c):
            for k in range(len(logits)):
                out[i, j] += caps.U_row[labels[i], k] * caps.U_col[j, k] * logits[k][i, j]
    return out


class TestStratifiedAggregate(unittest.TestCase):
    """Tests pour stratified_aggregate."""

    def setUp(self):
        self.caps = normalize_capabilities(np.array([[1.0, 3.0], [2.0, 2.0]]))

    def test_worked_example(self):
        """Exemple à la main : [[0.6167, 0.9667]]."""
        labels = torch.tensor([0])
        batches = [LogitBatch(torch.tensor([[2.0, 4.0]]), labels), LogitBatch(torch.tensor([[1.0, 1.0]]), labels)]
        result = stratified_aggregate(batches, self.caps)
        np.testing.assert_allclose(result.numpy(), [[37 / 60, 29 / 30]], atol=1e-4)

    def test_matches_loop_oracle(self):
        """500 instances aléatoires : accord avec la triple boucle à 1e-10."""
        rng = np.random.default_rng(0)
        for _ in range(500):
            c, m, b = (int(v) for v in rng.integers(1, 6, size=3))
            caps = normalize_capabilities(rng.exponential(size=(c, m)) + 1e-3)
            logits = [rng.normal(size=(b, c)) for _ in range(m)]
            labels = rng.integers(0, c, size=b)
            batches = [LogitBatch(torch.as_tensor(P), torch.as_tensor(labels)) for P in logits]
            result = stratified_aggregate(batches, caps).numpy()
            np.testing.assert_allclose(result, loop_aggregate(logits, labels, caps), atol=1e-10)

    def test_linear_in_logits(self):
        """Capacités fixées : SA(P + Q) = SA(P) + SA(Q)."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            c, m, b = (int(v) for v in rng.integers(1, 6, size=3))
            caps = normalize_capabilities(rng.exponential(size=(c, m)) + 1e-3)
            labels = torch.as_tensor(rng.integers(0, c, size=b))
            P = [torch.as_tensor(rng.normal(size=(b, c))) for _ in range(m)]
            Q = [torch.as_tensor(rng.normal(size=(b, c))) for _ in range(m)]
            ensembler = StratifiedEnsembler(caps)
            summed = ensembler([p + q for p, q in zip(P, Q)], labels)
            np.testing.assert_allclose(summed.numpy(), (ensembler(P, labels) + ensembler(Q, labels)).numpy(), atol=1e-12)

    def test_positive_scaling_keeps_hard_labels(self):
        """Logits multipliés par a > 0 : agrégat multiplié par a, étiquettes dures inchangées."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            c, m, b = (int(v) for v in rng.integers(2, 6, size=3))
            caps = normalize_capabilities(rng.exponential(size=(c, m)) + 1e-3)
            labels = torch.as_tensor(rng.integers(0, c, size=b))
            P = [torch.as_tensor(rng.normal(size=(b, c))) for _ in range(m)]
            a = float(rng.uniform(0.1, 10.0))
            ensembler = StratifiedEnsembler(caps)
            base = ensembler(P, labels)
            scaled = ensembler([a * p for p in P], labels)
            np.testing.assert_allclose(scaled.numpy(), a * base.numpy(), rtol=1e-12, atol=1e-12)
            self.assertTrue(torch.equal(hard_labels(scaled), hard_labels(base)))

    def test_uniform_reduces_to_average(self):
        """100 cas, capacités uniformes : agrégat = moyenne / c, mêmes étiquettes dures."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            c, m, b = (int(v) for v in rng.integers(2, 6, size=3))
            caps = CapabilityMatrices.uniform(c, m)
            logits = [torch.as_tensor(rng.normal(size=(b, c))) for _ in range(m)]
            labels = torch.as_tensor(rng.integers(0, c, size=b))
            stratified = StratifiedEnsembler(caps)(logits, labels)
            averaged = AveragingEnsembler()(logits, labels)
            np.testing.assert_allclose(stratified.numpy(), averaged.numpy() / c, atol=1e-12)
            self.assertTrue(torch.equal(hard_labels(stratified), hard_labels(averaged)))

    def test_differentiable(self):
        """Le gradient remonte jusqu'aux logits des clients."""
        labels = torch.tensor([0, 1])
        P1 = torch.ones((2, 2), dtype=torch.float64, requires_grad=True)
        P2 = torch.zeros((2, 2), dtype=torch.float64, requires_grad=True)
        stratified_aggregate([LogitBatch(P1, labels), LogitBatch(P2, labels)], self.caps).sum().backward()
        self.assertIsNotNone(P1.grad)
        self.assertTrue(torch.all(P1.grad > 0))

    def test_shape_errors(self):
        """Nombre de clients, formes ou étiquettes incohérents refusés."""
        labels = torch.tensor([0])
        one = LogitBatch(torch.tensor([[1.0, 2.0]]), labels)
        with self.assertRaises(ShapeMismatchError):
            stratified_aggregate([one], self.caps)
        with self.assertRaises(ShapeMismatchError):
            stratified_aggregate([one, LogitBatch(torch.tensor([[1.0, 2.0, 3.0]]), labels)], self.caps)
        with self.assertRaises(ShapeMismatchError):
            stratified_aggregate([one, LogitBatch(torch.tensor([[1.0, 2.0]]), torch.tensor([1]))], self.caps)

    def test_label_out_of_range(self):
        """Étiquette ≥ c refusée."""
        labels = torch.tensor([2])
        batch = LogitBatch(torch.tensor([[1.0, 2.0]]), labels)
        with self.assertRaises(LabelOutOfRangeError):
            stratified_aggregate([batch, batch], self.caps)


class TestHelpers(unittest.TestCase):
    """Tests pour in_model_weight et hard_labels."""

    def test_in_model_weight(self):
        """Colonne j multipliée par Ū_c(j, k)."""
        caps = normalize_capabilities(np.array([[1.0, 3.0], [2.0, 2.0]]))
        weighted = in_model_weight(LogitBatch(torch.tensor([[3.0, 5.0]]), torch.tensor([0])), caps, 1)
        np.testing.assert_allclose(weighted.numpy(), [[1.8, 2.0]], atol=1e-12)
        with self.assertRaises(ShapeMismatchError):
            in_model_weight(LogitBatch(torch.tensor([[3.0, 5.0]]), torch.tensor([0])), caps, 2)

    def test_hard_labels_ties(self):
        """Égalité : l'indice de classe le plus bas l'emporte."""
        P = torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [-1.0, -3.0, 0.5]])
        np.testing.assert_array_equal(hard_labels(P).numpy(), [0, 1, 2])

    def test_averaging_shape_mismatch(self):
        """Moyenne de logits de formes différentes refusée."""
        with self.assertRaises(ShapeMismatchError):
            AveragingEnsembler()([torch.zeros((2, 3)), torch.zeros((2, 4))], torch.tensor([0, 1]))


if __name__ == '__main__':
    unittest.main()
