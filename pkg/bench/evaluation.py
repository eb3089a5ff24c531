"""
Évaluation des modèles globaux.
"""
import numpy as np
import torch
from sklearn.metrics import accuracy_score

from config.constants import Mode
from data.schemas import LabeledDataset
from models.nnkit import DiffModel, forward_logits
from utils.exceptions import ShapeMismatchError


def predict_labels(model: DiffModel, features: np.ndarray) -> np.ndarray:
    """Classe prédite (argmax des logits, mode évaluation) pour chaque ligne."""
    with torch.no_grad():
        logits = forward_logits(model, features, Mode.EVAL)
    return np.argmax(logits.cpu().numpy(), axis=1)


def evaluate_top1(model: DiffModel, test: LabeledDataset) -> float:
    """
    Précision top-1 : fraction des échantillons dont le logit maximal est l'étiquette.

    Raises:
        ShapeMismatchError: sortie du modèle différente du nombre de classes du jeu de test
    """
    if model.n_outputs != test.n_classes:
        raise ShapeMismatchError(f"Le modèle produit {model.n_outputs} logits pour {test.n_classes} classes")
    if test.n_samples == 0:
        raise ShapeMismatchError("Jeu de test vide")
    return float(accuracy_score(test.labels, predict_labels(model, test.features)))
