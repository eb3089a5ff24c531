"""
Constantes et énumérations pour le laboratoire d'apprentissage fédéré one-shot.
"""
from enum import Enum
from typing import Dict, List, Tuple


class Scenario(Enum):
    """Scénarios de répartition des données entre clients."""
    DIRICHLET = "dirichlet"
    TWO_CLASS = "two_class"
    IID = "iid"


class Method(Enum):
    """Méthodes d'agrégation comparées."""
    FEDHYDRA = "fedhydra"
    DENSE = "dense"
    FEDAVG = "fedavg"


class Mode(Enum):
    """Mode d'exécution d'un modèle (batch-norm sur le lot ou statistiques courantes)."""
    TRAIN = "train"
    EVAL = "eval"


class Stage(Enum):
    """Étapes d'une expérience, utilisées dans la colonne `stage` des métriques."""
    LOCAL = "local"
    STRATIFY = "stratify"
    DISTILL = "distill"
    FEDAVG = "fedavg"
    ROUND = "round"
    EVAL = "eval"


class GeneratorOptimizer(Enum):
    """Optimiseur du générateur."""
    ADAM = "adam"
    SGD = "sgd"


# Architectures de classifieurs disponibles dans le registre nnkit
CLASSIFIER_ARCHITECTURES: List[str] = ["mlp_small", "mlp_wide", "cnn_small"]

# Hyperparamètres de référence à pleine échelle
REFERENCE_DEFAULTS: Dict[str, float] = {
    "local_lr": 0.01,
    "local_batch_size": 128,
    "local_epochs": 200,
    "generator_lr": 0.001,
    "lambda1": 1.0,
    "lambda2": 1.0,
    "generator_epochs": 30,
    "global_epochs": 200,
    "global_lr": 0.01,
    "clients": 5,
}

# Constantes de validation de la configuration
VALIDATION_RANGES: Dict[str, Dict[str, float]] = {
    "alpha": {"min": 1e-6, "max": 1e6, "default": 0.1},
    "clients": {"min": 1, "max": 1000, "default": 5},
    "n_classes": {"min": 2, "max": 1000, "default": 10},
    "n_per_class": {"min": 1, "max": 1_000_000, "default": 100},
    "feature_dim": {"min": 2, "max": 4096, "default": 8},
    "spread": {"min": 0.0, "max": 100.0, "default": 0.5},
    "separation": {"min": 0.0, "max": 1000.0, "default": 3.0},
    "local_epochs": {"min": 0, "max": 10_000, "default": 50},
    "local_batch_size": {"min": 1, "max": 1_000_000, "default": 32},
    "local_lr": {"min": 1e-12, "max": 10.0, "default": 0.05},
    "global_epochs": {"min": 1, "max": 100_000, "default": 60},
    "generator_epochs": {"min": 2, "max": 10_000, "default": 10},
    "global_lr": {"min": 1e-12, "max": 10.0, "default": 0.05},
    "generator_lr": {"min": 1e-12, "max": 10.0, "default": 0.001},
    "lambda1": {"min": 0.0, "max": 1e6, "default": 1.0},
    "lambda2": {"min": 0.0, "max": 1e6, "default": 1.0},
    "beta": {"min": 0.0, "max": 1e6, "default": 1.0},
    "temperature": {"min": 1e-6, "max": 1e6, "default": 1.0},
    "epsilon": {"min": 1e-300, "max": 1.0, "default": 1e-8},
    "rounds": {"min": 1, "max": 1000, "default": 1},
    "noise_dim": {"min": 1, "max": 4096, "default": 16},
    "synth_batch_size": {"min": 2, "max": 100_000, "default": 64},
    "distill_steps": {"min": 1, "max": 1000, "default": 1},
    "max_retries": {"min": 0, "max": 100_000, "default": 100},
    "test_fraction": {"min": 1e-6, "max": 10.0, "default": 0.2},
}

# Ensemble de valeurs de λ₁, λ₂ exploré par l'ablation
ABLATION_GRID: List[Tuple[float, float]] = [
    (1.0, 1.0),
    (0.5, 1.0),
    (0.0, 1.0),
    (1.0, 0.5),
    (1.0, 0.0),
    (0.0, 0.0),
]

# Colonnes des fichiers de métriques (ordre contractuel)
METRIC_COLUMNS: List[str] = ["method", "seed", "round", "epoch", "stage", "metric", "value"]

# Momentum des statistiques courantes de batch-norm
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
