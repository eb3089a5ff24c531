"""
Entraînement local d'un client (étape LocalUpdate).
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from config.constants import CLASSIFIER_ARCHITECTURES, REFERENCE_DEFAULTS, Mode
from data.schemas import LabeledDataset
from models.nnkit import DiffModel, build_classifier, forward_logits, to_tensor
from utils.exceptions import (
    InvalidArgumentError, LabelOutOfRangeError, NonFiniteLossError, UnknownArchitectureError
)
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

# (époque, perte moyenne, précision d'entraînement)
EpochCallback = Callable[[int, float, float], None]


@dataclass
class ClientBundle:
    """Modèle d'un client, son fragment de données et son identifiant."""

    model: DiffModel
    shard: LabeledDataset
    client_id: int

    def validate(self) -> None:
        if self.shard.n_samples == 0:
            raise InvalidArgumentError(f"Fragment vide pour le client {self.client_id}")
        if self.shard.labels.min() < 0 or self.shard.labels.max() >= self.shard.n_classes:
            raise LabelOutOfRangeError(f"Étiquettes hors de [0, c) pour le client {self.client_id}")
        if self.model.n_outputs != self.shard.n_classes:
            raise InvalidArgumentError(
                f"Sortie du modèle ({self.model.n_outputs}) ≠ nombre de classes ({self.shard.n_classes})"
            )


def _minibatches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # Un dernier lot d'un seul échantillon est fusionné avec le précédent (BN en mode entraînement)
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def local_update(
    bundle: ClientBundle,
    epochs: int = int(REFERENCE_DEFAULTS["local_epochs"]),
    batch_size: int = int(REFERENCE_DEFAULTS["local_batch_size"]),
    lr: float = REFERENCE_DEFAULTS["local_lr"],
    seed: int = 0,
    on_epoch: Optional[EpochCallback] = None,
) -> DiffModel:
    """
    Minimise l'entropie croisée sur le fragment du client par SGD en mini-lots.

    Le modèle du bundle n'est pas modifié : une copie entraînée est retournée.

    Args:
        bundle: modèle, fragment et identifiant du client
        epochs: nombre d'époques E (0 retourne une copie identique)
        batch_size: taille de mini-lot B
        lr: taux d'apprentissage η
        seed: graine de l'ordre des mini-lots
        on_epoch: rappel (époque, perte, précision) à chaque fin d'époque

    Returns:
        Modèle local entraîné

    Raises:
        NonFiniteLossError: perte non finie (diagnostic joint)
    """
    bundle.validate()
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise InvalidArgumentError(f"Hyperparamètres invalides : E={epochs}, B={batch_size}, η={lr}")

    model = bundle.model.clone()
    if epochs == 0:
        return model

    features = to_tensor(bundle.shard.features)
    labels = to_tensor(bundle.shard.labels, torch.long)
    n = bundle.shard.n_samples
    # Un fragment d'un seul échantillon s'entraîne avec les statistiques BN courantes
    mode = Mode.TRAIN if n >= 2 else Mode.EVAL
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.SGD(model.module.parameters(), lr=lr)

    loss_value, accuracy = float("nan"), float("nan")
    for epoch in range(epochs):
        total_loss, correct = 0.0, 0
        for step, idx in enumerate(_minibatches(rng.permutation(n), batch_size)):
            index = torch.from_numpy(idx)
            logits = forward_logits(model, features[index], mode)
            loss = F.cross_entropy(logits, labels[index])
            if not torch.isfinite(loss):
                diagnostics = {"client_id": bundle.client_id, "epoch": epoch, "step": step,
                               "loss": float(loss.detach()), "lr": lr}
                logger.error(f"Perte non finie pendant l'entraînement local : {diagnostics}")
                raise NonFiniteLossError(f"Perte non finie pour le client {bundle.client_id}", diagnostics)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach()) * len(idx)
            correct += int((logits.detach().argmax(dim=1) == labels[index]).sum())
        loss_value, accuracy = total_loss / n, correct / n
        if on_epoch is not None:
            on_epoch(epoch, loss_value, accuracy)

    logger.info(
        f"Client {bundle.client_id} entraîné ({model.architecture_tag}, {n} échantillons) : "
        f"perte {loss_value:.4f}, précision {accuracy:.3f}"
    )
    return model


def initial_client_models(architectures: List[str], feature_dim: int, c: int, seed: int) -> List[DiffModel]:
    """
    Modèles initiaux des clients. Les clients d'une même architecture partagent la
    même initialisation, comme s'ils la recevaient du serveur.
    """
    models = []
    for tag in architectures:
        if tag not in CLASSIFIER_ARCHITECTURES:
            raise UnknownArchitectureError(f"Architecture inconnue : {tag}")
        models.append(build_classifier(tag, feature_dim, c, derive_seed(seed, 201, CLASSIFIER_ARCHITECTURES.index(tag))))
    return models
