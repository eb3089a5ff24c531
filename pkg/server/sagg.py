"""
Agrégation stratifiée des logits clients et stratégies d'ensemble.

Les calculs opèrent sur des tenseurs torch afin de rester différentiables par
rapport au lot synthétique (entraînement du générateur).
"""
from typing import List, Protocol, Sequence

import numpy as np
import torch

from data.schemas import CapabilityMatrices, LogitBatch
from models.nnkit import DTYPE, to_tensor
from utils.exceptions import LabelOutOfRangeError, ShapeMismatchError


def _column_weights(caps: CapabilityMatrices, k: int) -> torch.Tensor:
    if not 0 <= k < caps.n_clients:
        raise ShapeMismatchError(f"Client {k} hors de [0, {caps.n_clients})")
    return torch.as_tensor(caps.U_col[:, k], dtype=DTYPE)


def in_model_weight(P_k: LogitBatch, caps: CapabilityMatrices, k: int) -> torch.Tensor:
    """
    Pondération intra-modèle : la colonne j des logits du client k est multipliée
    par Ū_c(j, k).

    Raises:
        ShapeMismatchError: nombre de colonnes différent de c, ou client hors bornes
    """
    logits = to_tensor(P_k.logits)
    if logits.ndim != 2 or logits.shape[1] != caps.n_classes:
        raise ShapeMismatchError(f"Logits de forme {tuple(logits.shape)} pour c={caps.n_classes}")
    return logits * _column_weights(caps, k).unsqueeze(0)


def stratified_aggregate(per_client_logits: Sequence[LogitBatch], caps: CapabilityMatrices) -> torch.Tensor:
    """
    Agrège les logits des m clients en une matrice (b × c).

    Chaque client est d'abord pondéré par sa colonne de Ū_c ; la ligne i du résultat
    combine ensuite les m lignes pondérées avec les poids Ū_r(y_i, :).

    Raises:
        ShapeMismatchError: formes ou étiquettes différentes entre clients
        LabelOutOfRangeError: étiquette hors de [0, c)
    """
    m = len(per_client_logits)
    if m != caps.n_clients:
        raise ShapeMismatchError(f"{m} matrices de logits pour {caps.n_clients} clients")
    labels = to_tensor(per_client_logits[0].labels, torch.long)
    shape = tuple(per_client_logits[0].logits.shape)
    for batch in per_client_logits[1:]:
        if tuple(batch.logits.shape) != shape:
            raise ShapeMismatchError(f"Formes de logits différentes : {shape} vs {tuple(batch.logits.shape)}")
        if not torch.equal(to_tensor(batch.labels, torch.long), labels):
            raise ShapeMismatchError("Les clients doivent partager le même vecteur d'étiquettes")
    if labels.numel() != shape[0]:
        raise ShapeMismatchError(f"{labels.numel()} étiquettes pour un lot de {shape[0]}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= caps.n_classes):
        raise LabelOutOfRangeError(f"Étiquettes hors de [0, {caps.n_classes})")

    weighted = torch.stack([in_model_weight(batch, caps, k) for k, batch in enumerate(per_client_logits)])
    V = torch.as_tensor(caps.U_row, dtype=DTYPE)[labels]  # (b × m)
    return torch.einsum("bm,mbc->bc", V, weighted)


def hard_labels(P: torch.Tensor) -> torch.Tensor:
    """Argmax par ligne ; en cas d'égalité, l'indice de classe le plus bas."""
    values = to_tensor(P).detach().cpu().numpy()
    return torch.as_tensor(np.argmax(values, axis=1), dtype=torch.long)


class Ensembler(Protocol):
    """Stratégie d'ensemble : logits par client et étiquettes → logits d'ensemble."""

    def __call__(self, per_client_logits: List[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
        ...


class StratifiedEnsembler:
    """Ensemble par agrégation stratifiée."""

    def __init__(self, caps: CapabilityMatrices):
        self.caps = caps

    def __call__(self, per_client_logits: List[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
        return stratified_aggregate([LogitBatch(P, labels) for P in per_client_logits], self.caps)


class AveragingEnsembler:
    """Ensemble par moyenne simple des logits (AE)."""

    def __call__(self, per_client_logits: List[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
        shapes = {tuple(P.shape) for P in per_client_logits}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"Formes de logits différentes : {sorted(shapes)}")
        return torch.stack([to_tensor(P) for P in per_client_logits]).mean(dim=0)
