"""
Tests unitaires pour l'entraînement du générateur et la distillation.
"""
import math
import unittest

import numpy as np
import torch

from bench.evaluation import evaluate_top1
from config.constants import GeneratorOptimizer, Method, Mode, Stage
from data.datagen import make_synthetic_dataset, partition_iid
from data.schemas import CapabilityMatrices, DistillConfig, GenLossWeights, LocalTrainingConfig, MetricsRecorder
from models.client import initial_client_models
from models.nnkit import BNStatSet, build_classifier, build_generator, generate, sample_noise
from server.baselines import dense_distill
from server.hasa import (
    _synthetic_labels, ad_loss, bn_alignment, distill_components, distill_loss, fedhydra, gen_ce_loss,
    gen_total_loss, multi_round, run_distillation, train_clients, train_generator_round
)
from server.sagg import AveragingEnsembler, StratifiedEnsembler
from server.stratify import model_stratification
from utils.exceptions import InvalidArgumentError, ShapeMismatchError
from utils.seeding import derive_seed


def flat_grad(loss, params) -> np.ndarray:
    grads = torch.autograd.grad(loss, params)
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


def numeric_grad(model, loss_at, step: float = 1e-5) -> np.ndarray:
    """Gradient par différences finies centrées sur le vecteur plat des paramètres."""
    theta = model.parameters
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        shifted = theta.copy()
        shifted[i] += step
        model.set_parameters(shifted)
        plus = loss_at()
        shifted[i] -= 2 * step
        model.set_parameters(shifted)
        minus = loss_at()
        grad[i] = (plus - minus) / (2 * step)
    model.set_parameters(theta)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


class TestLosses(unittest.TestCase):
    """Tests pour les pertes élémentaires."""

    def test_gen_ce_uniform_logits(self):
        """Logits nuls : CE = ln(c)."""
        loss = gen_ce_loss(torch.zeros((5, 4), dtype=torch.float64), torch.tensor([0, 1, 2, 3, 0]))
        self.assertAlmostEqual(float(loss), math.log(4), places=12)

    def test_bn_alignment_value(self):
        """Écart de moyenne de norme 1 sur un client, nul sur l'autre : moyenne 0.5."""
        zero, one = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)
        shifted = BNStatSet([(torch.tensor([1.0, 0.0], dtype=torch.float64), one)])
        stored = BNStatSet([(zero, one)])
        self.assertAlmostEqual(float(bn_alignment([shifted, stored], [stored, stored])), 0.5, places=12)

    def test_bn_alignment_mismatch(self):
        """Largeurs de couches différentes refusées."""
        a = BNStatSet([(torch.zeros(2), torch.ones(2))])
        b = BNStatSet([(torch.zeros(3), torch.ones(3))])
        with self.assertRaises(ShapeMismatchError):
            bn_alignment([a], [b])

    def test_ad_loss_value(self):
        """P = [[1, 0]], g = [[0, 1]] : −KL ≈ −0.4621 ; nul pour P = g."""
        P = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        g = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        # KL = σ(1)·(1 − 0) + σ(−1)·(0 − 1) = σ(1) − σ(−1) = tanh(1/2)
        self.assertAlmostEqual(float(ad_loss(P, g)), -math.tanh(0.5), places=10)
        self.assertAlmostEqual(float(ad_loss(P, g)), -0.4621, places=4)
        self.assertAlmostEqual(float(ad_loss(P, P.clone())), 0.0, places=12)
        self.assertLessEqual(float(ad_loss(P, g, temperature=3.0)), 0.0)

    def test_distill_components(self):
        """β = 0 et logits égaux : perte nulle ; exemple KL + CE à la main."""
        P = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        total, kl, ce = distill_components(P, P.clone(), beta=0.0)
        self.assertAlmostEqual(float(total), 0.0, places=12)
        student = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        total, kl, ce = distill_components(P, student, beta=1.0)
        self.assertAlmostEqual(float(kl), 0.4621, places=4)
        self.assertAlmostEqual(float(ce), math.log(1 + math.e), places=10)
        # tanh(1/2) + log(1 + e) = 0.4621 + 1.3133
        self.assertAlmostEqual(float(total), 1.7754, places=4)

    def test_distill_shape_mismatch(self):
        """Formes différentes refusées."""
        with self.assertRaises(ShapeMismatchError):
            distill_components(torch.zeros((2, 3)), torch.zeros((2, 4)), beta=1.0)


class TestGeneratorLoss(unittest.TestCase):
    """Tests pour gen_total_loss et distill_loss sur de vrais modèles."""

    def setUp(self):
        self.c, self.d, self.b = 3, 4, 8
        self.clients = [build_classifier("mlp_small", self.d, self.c, seed=s) for s in range(2)]
        self.global_model = build_classifier("mlp_small", self.d, self.c, seed=10)
        self.generator = build_generator(4, self.c, self.d, seed=3)
        self.caps = CapabilityMatrices(
            U=np.array([[1.0, 3.0], [2.0, 2.0], [0.5, 1.5]]),
            U_row=np.array([[0.25, 0.75], [0.5, 0.5], [0.25, 0.75]]),
            U_col=np.array([[2 / 7, 0.45], [4 / 7, 0.3], [1 / 7, 0.25]]),
        )
        self.z = sample_noise(self.b, 4, seed=5)
        self.y = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])

    def _loss(self, weights):
        x_hat = generate(self.generator, self.z, self.y, Mode.TRAIN)
        return gen_total_loss(x_hat, self.y, self.clients, self.caps, self.global_model, weights)

    def test_zero_lambdas_is_ce(self):
        """λ₁ = λ₂ = 0 : la perte totale se réduit à la CE."""
        with torch.no_grad():
            x_hat = generate(self.generator, self.z, self.y, Mode.TRAIN)
            total = gen_total_loss(x_hat, self.y, self.clients, self.caps, self.global_model, GenLossWeights(0.0, 0.0))
            P = StratifiedEnsembler(self.caps)([client.forward(x_hat, Mode.EVAL) for client in self.clients], self.y)
            self.assertAlmostEqual(float(total), float(gen_ce_loss(P, self.y)), places=12)

    def test_generator_gradient(self):
        """5 points : gradient analytique du générateur ≈ différences finies (erreur relative < 1e-3)."""
        weights = GenLossWeights(1.0, 1.0)

        def loss_at():
            with torch.no_grad():
                return float(self._loss(weights))

        for point in range(5):
            self.generator = build_generator(4, self.c, self.d, seed=100 + point)
            analytic = flat_grad(self._loss(weights), self.generator.parameter_list())
            self.assertLess(relative_error(analytic, numeric_grad(self.generator, loss_at)), 1e-3)

    def test_distill_gradient(self):
        """5 points : gradient de la distillation (β = 1) par rapport au modèle global ≈ différences finies."""
        with torch.no_grad():
            x_hat = generate(self.generator, self.z, self.y, Mode.TRAIN)
            P = AveragingEnsembler()([client.forward(x_hat, Mode.EVAL) for client in self.clients], self.y)

        for point in range(5):
            student = build_classifier("mlp_small", self.d, self.c, seed=200 + point)

            def loss_at():
                with torch.no_grad():
                    return float(distill_loss(x_hat, P, student, beta=1.0))

            analytic = flat_grad(distill_loss(x_hat, P, student, beta=1.0), student.parameter_list())
            self.assertLess(relative_error(analytic, numeric_grad(student, loss_at)), 1e-3)


class TestGeneratorRound(unittest.TestCase):
    """Tests pour train_generator_round."""

    def setUp(self):
        self.clients = [build_classifier("mlp_small", 4, 3, seed=s) for s in range(2)]
        self.global_model = build_classifier("mlp_small", 4, 3, seed=10)
        self.caps = CapabilityMatrices.uniform(3, 2)
        self.weights = GenLossWeights()

    def test_single_sgd_step_descends(self):
        """Un pas de SGD à petit taux ne fait pas croître la perte du générateur."""
        cfg = DistillConfig(generator_epochs=1, generator_lr=1e-4, batch_size=16, noise_dim=4,
                            generator_optimizer=GeneratorOptimizer.SGD)
        generator = build_generator(4, 3, 4, seed=1)
        z = sample_noise(16, 4, derive_seed(7, 1))
        y = _synthetic_labels(16, 3, derive_seed(7, 2))

        def current():
            with torch.no_grad():
                x_hat = generate(generator, z, y, Mode.TRAIN)
                return float(gen_total_loss(x_hat, y, self.clients, self.caps, self.global_model, self.weights))

        before = current()
        train_generator_round(generator, self.clients, self.caps, self.global_model, cfg, self.weights, seed=7)
        self.assertLessEqual(current(), before)

    def test_models_untouched(self):
        """Clients et modèle global inchangés ; lot synthétique de la bonne forme."""
        cfg = DistillConfig(generator_epochs=3, batch_size=8, noise_dim=4)
        before = [(m.parameters, m.buffers_vector()) for m in self.clients + [self.global_model]]
        round_ = train_generator_round(build_generator(4, 3, 4, seed=1), self.clients, self.caps,
                                       self.global_model, cfg, self.weights, seed=0)
        for (params, buffers), model in zip(before, self.clients + [self.global_model]):
            np.testing.assert_array_equal(params, model.parameters)
            np.testing.assert_array_equal(buffers, model.buffers_vector())
        self.assertEqual(tuple(round_.synth_batch.shape), (8, 4))
        self.assertEqual(tuple(round_.P.shape), (8, 3))
        self.assertFalse(round_.P.requires_grad)
        self.assertEqual(set(round_.losses), {"gen_loss", "ce", "bn", "ad"})

    def test_requires_caps_or_ensembler(self):
        """Sans capacités ni stratégie d'ensemble : erreur."""
        with self.assertRaises(InvalidArgumentError):
            train_generator_round(build_generator(4, 3, 4, seed=1), self.clients, None, self.global_model,
                                  DistillConfig(noise_dim=4), self.weights, seed=0)


class TestDistillation(unittest.TestCase):
    """Tests pour run_distillation et fedhydra."""

    def setUp(self):
        self.clients = [build_classifier("mlp_small", 4, 3, seed=s) for s in range(3)]
        self.cfg = DistillConfig(global_epochs=3, generator_epochs=2, batch_size=16, noise_dim=4)
        self.caps = CapabilityMatrices.uniform(3, 3)

    def test_history_and_metrics(self):
        """Une ligne d'historique et des métriques par époque globale."""
        recorder = MetricsRecorder("fedhydra", 0)
        result = fedhydra(self.clients, self.caps, self.cfg, GenLossWeights(), seed=0,
                          evaluator=lambda model: 0.5, recorder=recorder)
        self.assertEqual(len(result.history), 3)
        self.assertEqual(result.accuracy_trace, [0.5, 0.5, 0.5])
        self.assertEqual(set(result.history[0]),
                         {"gen_loss", "ce", "bn", "ad", "distill_kl", "distill_ce", "test_top1"})
        self.assertTrue(all(row.stage == Stage.DISTILL.value for row in recorder.rows))
        self.assertEqual(sorted({row.epoch for row in recorder.rows}), [0, 1, 2])

    def test_determinism(self):
        """Même graine, même modèle global au bit près."""
        a = run_distillation(self.clients, AveragingEnsembler(), self.cfg, GenLossWeights(), seed=4)
        b = run_distillation(self.clients, AveragingEnsembler(), self.cfg, GenLossWeights(), seed=4)
        np.testing.assert_array_equal(a.global_model.parameters, b.global_model.parameters)

    def test_starting_point_copied(self):
        """Le modèle global de départ est copié, pas modifié."""
        start = build_classifier("mlp_small", 4, 3, seed=42)
        before = start.parameters
        result = run_distillation(self.clients, AveragingEnsembler(), self.cfg, GenLossWeights(), seed=0,
                                  global_model=start)
        np.testing.assert_array_equal(before, start.parameters)
        self.assertIsNot(result.global_model, start)

    def test_caps_shape_mismatch(self):
        """Capacités incompatibles avec le nombre de clients refusées."""
        with self.assertRaises(ShapeMismatchError):
            fedhydra(self.clients, CapabilityMatrices.uniform(3, 2), self.cfg, GenLossWeights(), seed=0)

    def test_clients_mismatch(self):
        """Clients de dimensions différentes ou liste vide refusés."""
        with self.assertRaises(InvalidArgumentError):
            run_distillation([], AveragingEnsembler(), self.cfg, GenLossWeights(), seed=0)
        mixed = self.clients[:1] + [build_classifier("mlp_small", 4, 2, seed=0)]
        with self.assertRaises(ShapeMismatchError):
            run_distillation(mixed, AveragingEnsembler(), self.cfg, GenLossWeights(), seed=0)


class TestMultiRound(unittest.TestCase):
    """Tests pour multi_round."""

    @classmethod
    def setUpClass(cls):
        cls.dataset = make_synthetic_dataset(3, 20, 4, 0.3, seed=0)
        cls.partition = partition_iid(cls.dataset, 2, seed=0)
        cls.local = LocalTrainingConfig(epochs=2, batch_size=8, lr=0.05)
        cls.cfg = DistillConfig(global_epochs=2, generator_epochs=2, batch_size=8, noise_dim=4)

    def _run(self, method, recorder=None):
        return multi_round(self.partition, self.dataset, 2, self.local, self.cfg, GenLossWeights(), seed=0,
                           architectures=["mlp_small", "mlp_small"], method=method,
                           evaluator=lambda model: evaluate_top1(model, self.dataset), recorder=recorder)

    def test_fedhydra_rounds(self):
        """Deux rounds : deux jeux de capacités, deux distillations, deux précisions."""
        recorder = MetricsRecorder(Method.FEDHYDRA.value, 0)
        result = self._run(Method.FEDHYDRA, recorder)
        self.assertEqual(len(result.capabilities), 2)
        self.assertEqual(len(result.distillations), 2)
        self.assertEqual(len(result.round_top1), 2)
        self.assertTrue(all(0.0 <= acc <= 1.0 for acc in result.round_top1))
        stages = {(row.stage, row.round) for row in recorder.timings}
        self.assertIn((Stage.STRATIFY.value, 1), stages)
        self.assertEqual(sum(row.stage == Stage.ROUND.value for row in recorder.rows), 2)

    def test_dense_has_no_capabilities(self):
        """Méthode par moyenne : aucune stratification."""
        result = self._run(Method.DENSE)
        self.assertEqual(result.capabilities, [])
        self.assertEqual(len(result.distillations), 2)

    def _trained_clients(self):
        initial = initial_client_models(["mlp_small", "mlp_small"], 4, 3, 0)
        return train_clients(self.partition, self.dataset, initial, self.local, 0)

    def _single_round(self, method):
        return multi_round(self.partition, self.dataset, 1, self.local, self.cfg, GenLossWeights(), seed=0,
                           architectures=["mlp_small", "mlp_small"], method=method)

    def test_single_round_is_one_shot_fedhydra(self):
        """Un seul round : identique à entraînement local, stratification puis distillation."""
        clients = self._trained_clients()
        caps = model_stratification(
            clients, 3, self.cfg.generator_epochs, self.cfg.generator_lr, self.cfg.batch_size, 1e-8,
            seed=derive_seed(0, 203, 0), noise_dim=self.cfg.noise_dim,
            optimizer=self.cfg.generator_optimizer, conditional=self.cfg.conditional_generator,
        )
        expected = fedhydra(clients, caps, self.cfg, GenLossWeights(), derive_seed(0, 204, 0))
        result = self._single_round(Method.FEDHYDRA)
        np.testing.assert_array_equal(result.global_model.parameters, expected.global_model.parameters)
        np.testing.assert_array_equal(result.capabilities[0].U, caps.U)

    def test_single_round_is_one_shot_dense(self):
        """Un seul round par moyenne : identique à dense_distill sur les clients entraînés."""
        expected = dense_distill(self._trained_clients(), self.cfg, GenLossWeights(), derive_seed(0, 204, 0))
        result = self._single_round(Method.DENSE)
        np.testing.assert_array_equal(result.global_model.parameters, expected.global_model.parameters)

    def test_invalid_arguments(self):
        """FedAvg, zéro round ou architectures en nombre incorrect refusés."""
        with self.assertRaises(InvalidArgumentError):
            self._run(Method.FEDAVG)
        with self.assertRaises(InvalidArgumentError):
            multi_round(self.partition, self.dataset, 0, self.local, self.cfg, GenLossWeights(), seed=0,
                        architectures=["mlp_small", "mlp_small"])
        with self.assertRaises(InvalidArgumentError):
            multi_round(self.partition, self.dataset, 1, self.local, self.cfg, GenLossWeights(), seed=0,
                        architectures=["mlp_small"])


if __name__ == '__main__':
    unittest.main()
