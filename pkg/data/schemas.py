"""
Schémas de données pour le laboratoire d'apprentissage fédéré one-shot.
"""
import hashlib
import json
from dataclasses import dataclass, field
from statistics import mean
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from config.constants import (
    VALIDATION_RANGES, GeneratorOptimizer, Method, Scenario, REFERENCE_DEFAULTS
)
from utils.exceptions import InvalidArgumentError, LabelOutOfRangeError


def _default(name: str):
    return VALIDATION_RANGES[name]["default"]


@dataclass
class LabeledDataset:
    """Matrice de caractéristiques et étiquettes entières, unité des données client et de test."""

    features: np.ndarray  # (n_samples, feature_dim)
    labels: np.ndarray  # (n_samples,) entiers dans [0, c)
    n_classes: int

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        """Nombre d'échantillons par classe (longueur c)."""
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices) -> "LabeledDataset":
        """Retourne le fragment correspondant aux indices donnés."""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)

    def validate(self, require_all_classes: bool = False) -> None:
        """
        Vérifie les invariants du jeu de données.

        Args:
            require_all_classes: exige au moins un échantillon par classe (jeux complets)

        Raises:
            InvalidArgumentError: dimensions incohérentes
            LabelOutOfRangeError: étiquette hors de [0, c)
        """
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InvalidArgumentError(
                f"Dimensions incohérentes : {self.features.shape} vs {self.labels.shape}"
            )
        if self.n_samples and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelOutOfRangeError(f"Étiquettes hors de [0, {self.n_classes})")
        if require_all_classes and np.any(self.class_counts() == 0):
            raise InvalidArgumentError("Au moins une classe n'a aucun échantillon")


@dataclass
class PartitionSpec:
    """Listes d'indices par client réalisant un scénario d'hétérogénéité."""

    client_indices: List[List[int]]
    scenario_tag: Scenario
    alpha: Optional[float] = None
    seed: Optional[int] = None

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> List[int]:
        """Taille de chaque fragment client."""
        return [len(indices) for indices in self.client_indices]

    def validate(self, parent_size: int) -> None:
        """
        Vérifie disjonction, inclusion dans le parent et non-vacuité.

        Raises:
            InvalidArgumentError: si un invariant est violé
        """
        seen = set()
        for k, indices in enumerate(self.client_indices):
            if not indices:
                raise InvalidArgumentError(f"Le client {k} n'a aucun échantillon")
            for i in indices:
                if i < 0 or i >= parent_size:
                    raise InvalidArgumentError(f"Indice {i} hors du jeu parent (taille {parent_size})")
                if i in seen:
                    raise InvalidArgumentError(f"Indice {i} attribué à plusieurs clients")
                seen.add(i)

    def to_dict(self) -> Dict[str, Any]:
        """Document JSON stable de la partition."""
        return {
            "scenario_tag": self.scenario_tag.value,
            "alpha": self.alpha,
            "seed": self.seed,
            "client_indices": [[int(i) for i in indices] for indices in self.client_indices],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PartitionSpec":
        doc = json.loads(text)
        return cls(
            client_indices=[list(map(int, indices)) for indices in doc["client_indices"]],
            scenario_tag=Scenario(doc["scenario_tag"]),
            alpha=doc.get("alpha"),
            seed=doc.get("seed"),
        )


@dataclass
class LossTrace:
    """Trace de la perte CE sur les T_G itérations d'entraînement du générateur."""

    values: np.ndarray
    client_id: int
    class_id: int

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass
class CapabilityMatrices:
    """Matrice brute U (c × m) et ses normalisations par ligne (Ū_r) et par colonne (Ū_c)."""

    U: np.ndarray
    U_row: np.ndarray
    U_col: np.ndarray
    epsilon: float = 1e-8

    @property
    def n_classes(self) -> int:
        return int(self.U.shape[0])

    @property
    def n_clients(self) -> int:
        return int(self.U.shape[1])

    @classmethod
    def uniform(cls, n_classes: int, n_clients: int, epsilon: float = 1e-8) -> "CapabilityMatrices":
        """Matrices uniformes : Ū_r = 1/m partout, Ū_c = 1/c partout."""
        return cls(
            U=np.ones((n_classes, n_clients)),
            U_row=np.full((n_classes, n_clients), 1.0 / n_clients),
            U_col=np.full((n_classes, n_clients), 1.0 / n_classes),
            epsilon=epsilon,
        )

    def to_frames(self) -> Dict[str, pd.DataFrame]:
        """DataFrames (c lignes × m colonnes, en-têtes client_k) pour l'export CSV."""
        columns = [f"client_{k}" for k in range(self.n_clients)]
        return {
            "U": pd.DataFrame(self.U, columns=columns),
            "Ur": pd.DataFrame(self.U_row, columns=columns),
            "Uc": pd.DataFrame(self.U_col, columns=columns),
        }


@dataclass
class LogitBatch:
    """Logits d'un client sur un lot (b × c) et étiquettes cibles associées."""

    logits: torch.Tensor
    labels: torch.Tensor


@dataclass
class GenLossWeights:
    """Poids λ₁ (perte BN) et λ₂ (perte adversariale) de la perte du générateur."""

    lambda1: float = REFERENCE_DEFAULTS["lambda1"]
    lambda2: float = REFERENCE_DEFAULTS["lambda2"]

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidArgumentError(f"{name} doit être fini et positif, reçu : {value}")


@dataclass
class LocalTrainingConfig:
    """Hyperparamètres de l'entraînement local (valeurs de référence par défaut)."""

    epochs: int = int(REFERENCE_DEFAULTS["local_epochs"])
    batch_size: int = int(REFERENCE_DEFAULTS["local_batch_size"])
    lr: float = REFERENCE_DEFAULTS["local_lr"]


@dataclass
class DistillConfig:
    """Hyperparamètres de la boucle génération / distillation."""

    beta: float = 1.0
    global_epochs: int = 60
    generator_epochs: int = 10
    global_lr: float = 0.05
    generator_lr: float = 0.001
    batch_size: int = 64
    temperature: float = 1.0
    noise_dim: int = 16
    distill_steps: int = 1
    generator_optimizer: GeneratorOptimizer = GeneratorOptimizer.ADAM
    conditional_generator: bool = True
    global_architecture: str = "mlp_small"

    def __post_init__(self):
        for name in ("global_epochs", "generator_epochs", "distill_steps"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} doit être ≥ 1")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size doit être ≥ 2 (statistiques BN)")
        for name in ("global_lr", "generator_lr", "temperature"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} doit être > 0")
        if self.beta < 0:
            raise InvalidArgumentError("beta doit être ≥ 0")


@dataclass
class ExperimentConfig:
    """Configuration complète d'une expérience (un document clé-valeur plat)."""

    scenario: Scenario = Scenario.DIRICHLET
    alpha: float = _default("alpha")
    clients: int = _default("clients")
    n_classes: int = _default("n_classes")
    n_per_class: int = _default("n_per_class")
    feature_dim: int = _default("feature_dim")
    spread: float = _default("spread")
    separation: float = _default("separation")
    architectures: List[str] = field(default_factory=lambda: ["mlp_small"])
    global_architecture: Optional[str] = None
    local_epochs: int = _default("local_epochs")
    local_batch_size: int = _default("local_batch_size")
    local_lr: float = _default("local_lr")
    global_epochs: int = _default("global_epochs")
    generator_epochs: int = _default("generator_epochs")
    global_lr: float = _default("global_lr")
    generator_lr: float = _default("generator_lr")
    lambda1: float = _default("lambda1")
    lambda2: float = _default("lambda2")
    beta: float = _default("beta")
    temperature: float = _default("temperature")
    epsilon: float = _default("epsilon")
    rounds: int = _default("rounds")
    methods: List[Method] = field(default_factory=lambda: [Method.FEDHYDRA, Method.DENSE, Method.FEDAVG])
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    noise_dim: int = _default("noise_dim")
    synth_batch_size: int = _default("synth_batch_size")
    distill_steps: int = _default("distill_steps")
    generator_optimizer: GeneratorOptimizer = GeneratorOptimizer.ADAM
    conditional_generator: bool = True
    max_retries: int = _default("max_retries")
    test_fraction: float = _default("test_fraction")

    def client_architectures(self) -> List[str]:
        """Architecture de chaque client ; une liste d'un élément s'applique à tous."""
        if len(self.architectures) == 1:
            return list(self.architectures) * self.clients
        if len(self.architectures) != self.clients:
            raise InvalidArgumentError(
                f"{len(self.architectures)} architectures pour {self.clients} clients"
            )
        return list(self.architectures)

    @property
    def is_heterogeneous(self) -> bool:
        return len(set(self.client_architectures())) > 1

    def local_config(self) -> LocalTrainingConfig:
        return LocalTrainingConfig(self.local_epochs, self.local_batch_size, self.local_lr)

    def loss_weights(self) -> GenLossWeights:
        return GenLossWeights(self.lambda1, self.lambda2)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            beta=self.beta,
            global_epochs=self.global_epochs,
            generator_epochs=self.generator_epochs,
            global_lr=self.global_lr,
            generator_lr=self.generator_lr,
            batch_size=self.synth_batch_size,
            temperature=self.temperature,
            noise_dim=self.noise_dim,
            distill_steps=self.distill_steps,
            generator_optimizer=self.generator_optimizer,
            conditional_generator=self.conditional_generator,
            global_architecture=self.global_architecture or self.client_architectures()[0],
        )

    def to_dict(self) -> Dict[str, Any]:
        """Représentation JSON (énumérations converties en chaînes)."""
        doc = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, (Scenario, GeneratorOptimizer)):
                value = value.value
            elif name == "methods":
                value = [m.value for m in value]
            elif isinstance(value, list):
                value = list(value)
            doc[name] = value
        return doc

    def config_hash(self) -> str:
        """Empreinte courte de la configuration (hors répertoire de sortie)."""
        doc = self.to_dict()
        doc.pop("output_dir")
        canonical = json.dumps(doc, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:10]


@dataclass
class MetricRow:
    """Ligne du flux de métriques (schéma method,seed,round,epoch,stage,metric,value)."""

    method: str
    seed: int
    round: int
    epoch: int
    stage: str
    metric: str
    value: float

    def as_tuple(self) -> Tuple:
        return (self.method, self.seed, self.round, self.epoch, self.stage, self.metric, self.value)


@dataclass
class ExperimentResult:
    """Métriques, traces et artefacts d'une expérience configurée."""

    config: ExperimentConfig
    rows: List[MetricRow] = field(default_factory=list)
    timings: List[MetricRow] = field(default_factory=list)
    final_top1: Dict[str, Dict[int, float]] = field(default_factory=dict)
    capabilities: Dict[Tuple[int, int], CapabilityMatrices] = field(default_factory=dict)
    global_models: Dict[Tuple[str, int], Any] = field(default_factory=dict)

    def accuracy_traces(self) -> Dict[Tuple[str, int], List[float]]:
        """Traces de précision de test par (méthode, graine), dernier tour."""
        last_round = self.config.rounds - 1
        traces: Dict[Tuple[str, int], List[float]] = {}
        for row in self.rows:
            if row.stage == "distill" and row.metric == "test_top1" and row.round == last_round:
                traces.setdefault((row.method, row.seed), []).append(row.value)
        return traces

    def mean_top1(self) -> Dict[str, float]:
        return {method: mean(per_seed.values()) for method, per_seed in self.final_top1.items()}

    def summary(self) -> Dict[str, Any]:
        """Résumé sérialisable en JSON (contenu de results.json)."""
        means = self.mean_top1()
        doc: Dict[str, Any] = {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "final_top1": {
                method: {str(seed): acc for seed, acc in sorted(per_seed.items())}
                for method, per_seed in self.final_top1.items()
            },
            "mean_top1": means,
        }
        if Method.FEDHYDRA.value in means and Method.DENSE.value in means:
            doc["fedhydra_minus_dense"] = means[Method.FEDHYDRA.value] - means[Method.DENSE.value]
        return doc


@dataclass
class MetricsRecorder:
    """Collecteur des lignes de métriques et de durées d'une exécution (méthode, graine)."""

    method: str
    seed: int
    rows: List[MetricRow] = field(default_factory=list)
    timings: List[MetricRow] = field(default_factory=list)

    def record(self, stage: str, round_index: int, epoch: int, metric: str, value: float) -> None:
        self.rows.append(MetricRow(self.method, self.seed, round_index, epoch, stage, metric, float(value)))

    def timing(self, stage: str, round_index: int, seconds: float) -> None:
        self.timings.append(MetricRow(self.method, self.seed, round_index, 0, stage, "seconds", float(seconds)))
