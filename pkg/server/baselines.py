"""
Méthodes de référence : FedAvg one-shot et DENSE (distillation depuis la
moyenne des logits clients).
"""
import logging
import time
from typing import Optional, Sequence

import numpy as np
import torch

from config.constants import Mode, Stage
from data.schemas import (
    DistillConfig, GenLossWeights, LabeledDataset, LocalTrainingConfig, MetricsRecorder, PartitionSpec
)
from models.client import initial_client_models
from models.nnkit import DiffModel, forward_logits
from server.hasa import DistillationResult, Evaluator, run_distillation, train_clients
from server.sagg import AveragingEnsembler
from utils.exceptions import ArchitectureMismatchError, InvalidArgumentError, stage_context

logger = logging.getLogger(__name__)


def fedavg_aggregate(models: Sequence[DiffModel], sample_counts: Sequence[int]) -> DiffModel:
    """
    Moyenne des paramètres (et des statistiques BN courantes) pondérée par n_k / Σ n.

    Raises:
        ArchitectureMismatchError: architectures ou nombres de paramètres différents
        InvalidArgumentError: liste vide ou effectifs invalides
    """
    if not models:
        raise InvalidArgumentError("Au moins un modèle est requis")
    if len(sample_counts) != len(models):
        raise InvalidArgumentError(f"{len(sample_counts)} effectifs pour {len(models)} modèles")
    tags = {model.architecture_tag for model in models}
    sizes = {model.n_parameters for model in models}
    if len(tags) > 1 or len(sizes) > 1:
        raise ArchitectureMismatchError(f"FedAvg exige des architectures identiques : {sorted(tags)}")
    counts = np.asarray(sample_counts, dtype=float)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise InvalidArgumentError(f"Effectifs invalides : {list(sample_counts)}")

    weights = counts / counts.sum()
    merged = models[0].clone()
    merged.set_parameters(sum(w * model.parameters for w, model in zip(weights, models)))
    if merged.bn_layers:
        merged.set_buffers(sum(w * model.buffers_vector() for w, model in zip(weights, models)))
    return merged


def ae_logits(client_models: Sequence[DiffModel], batch) -> torch.Tensor:
    """Moyenne simple des logits des clients sur un lot (mode évaluation)."""
    if not client_models:
        raise InvalidArgumentError("Au moins un modèle client est requis")
    with torch.no_grad():
        per_client = [forward_logits(model, batch, Mode.EVAL) for model in client_models]
        return AveragingEnsembler()(per_client, None)


def dense_distill(
    client_models: Sequence[DiffModel],
    cfg: DistillConfig,
    weights: GenLossWeights,
    seed: int,
    evaluator: Optional[Evaluator] = None,
    recorder: Optional[MetricsRecorder] = None,
    round_index: int = 0,
    global_model: Optional[DiffModel] = None,
) -> DistillationResult:
    """
    Même boucle générateur / distillation que FedHydra, ensemble par moyenne des logits.

    Args:
        global_model: point de départ de la distillation (round précédent), sinon
            initialisation à partir de la graine
    """
    return run_distillation(
        client_models, AveragingEnsembler(), cfg, weights, seed,
        evaluator=evaluator, recorder=recorder, round_index=round_index, global_model=global_model,
    )


def fedavg_rounds(
    partition: PartitionSpec,
    dataset: LabeledDataset,
    rounds: int,
    local_cfg: LocalTrainingConfig,
    seed: int,
    architecture: str,
    evaluator: Optional[Evaluator] = None,
    recorder: Optional[MetricsRecorder] = None,
) -> DiffModel:
    """
    FedAvg sur R rounds ; R = 1 est la variante one-shot.

    Tous les clients partent du même modèle : l'initialisation commune au premier
    round, le modèle moyenné ensuite.
    """
    if rounds < 1:
        raise InvalidArgumentError(f"rounds doit être ≥ 1, reçu : {rounds}")
    m = partition.n_clients
    global_model = initial_client_models([architecture], dataset.feature_dim, dataset.n_classes, seed)[0]
    for r in range(rounds):
        started = time.perf_counter()
        with stage_context(Stage.FEDAVG.value, round_index=r):
            clients = train_clients(partition, dataset, [global_model] * m, local_cfg, seed, r, recorder)
            global_model = fedavg_aggregate(clients, partition.sizes())
        if recorder is not None:
            recorder.timing(Stage.FEDAVG.value, r, time.perf_counter() - started)
        if evaluator is not None:
            top1 = float(evaluator(global_model))
            if recorder is not None:
                recorder.record(Stage.ROUND.value, r, 0, "test_top1", top1)
            logger.info(f"Round {r} (fedavg) : précision top-1 {top1:.4f}")
    return global_model
