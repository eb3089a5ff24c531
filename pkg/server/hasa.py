"""
Entraînement du générateur et distillation du modèle global (agrégation
stratifiée guidée par les capacités des clients).

Le générateur et le modèle global sont entraînés en alternance : à chaque
époque globale, le générateur effectue T_G pas sur la perte
CE + λ₁·BN + λ₂·AD, puis le modèle global est distillé sur le lot synthétique
final. Les modèles clients ne sont jamais modifiés.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from config.constants import Method, Mode, Stage
from config.settings import Settings
from data.schemas import (
    CapabilityMatrices, DistillConfig, GenLossWeights, LabeledDataset, LocalTrainingConfig,
    MetricsRecorder, PartitionSpec
)
from models.client import ClientBundle, initial_client_models, local_update
from models.nnkit import (
    DTYPE, BNStatSet, DiffModel, apply_gradients, bn_running_stats, build_classifier,
    build_generator, forward_logits, forward_with_bn_stats, generate, make_optimizer,
    sample_noise, to_tensor
)
from server.sagg import Ensembler, StratifiedEnsembler, hard_labels
from server.stratify import model_stratification
from utils.exceptions import InvalidArgumentError, NonFiniteLossError, ShapeMismatchError, stage_context
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

Evaluator = Callable[[DiffModel], float]


# ---------------------------------------------------------------------------
# Pertes
# ---------------------------------------------------------------------------

def gen_ce_loss(P: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Entropie croisée moyenne entre les logits agrégés P et les étiquettes cibles y."""
    return F.cross_entropy(to_tensor(P), to_tensor(y, torch.long))


def bn_alignment(batch_stats: Sequence[BNStatSet], running_stats: Sequence[BNStatSet]) -> torch.Tensor:
    """
    (1/m) Σ_k Σ_l (‖μ_l − μ_{k,l}‖₂ + ‖σ²_l − σ²_{k,l}‖₂) entre les statistiques du
    lot synthétique et les statistiques courantes de chaque client.
    """
    if len(batch_stats) != len(running_stats) or not batch_stats:
        raise ShapeMismatchError(f"{len(batch_stats)} jeux de statistiques pour {len(running_stats)} clients")
    total = torch.zeros((), dtype=DTYPE)
    for observed, stored in zip(batch_stats, running_stats):
        if observed.widths() != stored.widths():
            raise ShapeMismatchError(f"Couches BN incompatibles : {observed.widths()} vs {stored.widths()}")
        for (mean, var), (running_mean, running_var) in zip(observed.layers, stored.layers):
            total = total + torch.linalg.vector_norm(mean - running_mean) + torch.linalg.vector_norm(var - running_var)
    return total / len(batch_stats)


def bn_loss(synth_batch: torch.Tensor, client_models: Sequence[DiffModel]) -> torch.Tensor:
    """
    Perte d'alignement BN du lot synthétique sur l'ensemble des clients.

    Raises:
        NoBatchNormError: un client sans couche BN
        BatchTooSmallError: lot de moins de 2 échantillons
    """
    observed = [forward_with_bn_stats(model, synth_batch, Mode.EVAL)[1] for model in client_models]
    return bn_alignment(observed, [bn_running_stats(model) for model in client_models])


def _kl(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    # KL(softmax(teacher/τ) ‖ softmax(student/τ)), moyenne sur le lot
    return F.kl_div(
        F.log_softmax(to_tensor(student_logits) / temperature, dim=1),
        F.log_softmax(to_tensor(teacher_logits) / temperature, dim=1),
        reduction="batchmean",
        log_target=True,
    )


def ad_loss(P: torch.Tensor, global_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Perte adversariale : −KL entre l'ensemble et le modèle global (≤ 0)."""
    if tuple(P.shape) != tuple(global_logits.shape):
        raise ShapeMismatchError(f"Formes différentes : {tuple(P.shape)} vs {tuple(global_logits.shape)}")
    return -_kl(P, global_logits, temperature)


@dataclass
class GeneratorObjective:
    """Perte totale du générateur et ses composantes, avec les logits agrégés."""

    total: torch.Tensor
    ce: torch.Tensor
    bn: torch.Tensor
    ad: torch.Tensor
    P: torch.Tensor

    def values(self) -> Dict[str, float]:
        return {
            "gen_loss": float(self.total.detach()),
            "ce": float(self.ce.detach()),
            "bn": float(self.bn.detach()),
            "ad": float(self.ad.detach()),
        }


def generator_objective(
    x_hat: torch.Tensor,
    y: torch.Tensor,
    client_models: Sequence[DiffModel],
    ensembler: Ensembler,
    global_model: DiffModel,
    weights: GenLossWeights,
    temperature: float = 1.0,
) -> GeneratorObjective:
    """Évalue CE + λ₁·BN + λ₂·AD ; les clients et le modèle global restent en mode évaluation."""
    per_client, observed = [], []
    for model in client_models:
        logits, stats = forward_with_bn_stats(model, x_hat, Mode.EVAL)
        per_client.append(logits)
        observed.append(stats)
    P = ensembler(per_client, y)
    ce = gen_ce_loss(P, y)
    bn = bn_alignment(observed, [bn_running_stats(model) for model in client_models])
    ad = ad_loss(P, forward_logits(global_model, x_hat, Mode.EVAL), temperature)
    total = ce + weights.lambda1 * bn + weights.lambda2 * ad
    return GeneratorObjective(total=total, ce=ce, bn=bn, ad=ad, P=P)


def gen_total_loss(
    x_hat: torch.Tensor,
    y: torch.Tensor,
    client_models: Sequence[DiffModel],
    caps: CapabilityMatrices,
    global_model: DiffModel,
    weights: GenLossWeights,
    temperature: float = 1.0,
    ensembler: Optional[Ensembler] = None,
) -> torch.Tensor:
    """L_G = CE(P, y) + λ₁·L_BN + λ₂·L_AD, avec P issu de l'agrégation stratifiée par défaut."""
    strategy = ensembler if ensembler is not None else StratifiedEnsembler(caps)
    return generator_objective(x_hat, y, client_models, strategy, global_model, weights, temperature).total


def distill_components(
    P: torch.Tensor, student_logits: torch.Tensor, beta: float, temperature: float = 1.0
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, KL, CE) de la distillation ; la CE vise les étiquettes dures argmax(P)."""
    P = to_tensor(P).detach()
    if tuple(P.shape) != tuple(student_logits.shape):
        raise ShapeMismatchError(f"Formes différentes : {tuple(P.shape)} vs {tuple(student_logits.shape)}")
    kl = _kl(P, student_logits, temperature)
    ce = F.cross_entropy(student_logits, hard_labels(P))
    return kl + beta * ce, kl, ce


def distill_loss(
    x_hat: torch.Tensor, P: torch.Tensor, global_model: DiffModel, beta: float = 1.0, temperature: float = 1.0
) -> torch.Tensor:
    """Perte de distillation KL(P ‖ g) + β·CE(g, argmax P) ; le modèle global est en mode entraînement."""
    student = forward_logits(global_model, to_tensor(x_hat).detach(), Mode.TRAIN)
    return distill_components(P, student, beta, temperature)[0]


# ---------------------------------------------------------------------------
# Boucle générateur / distillation
# ---------------------------------------------------------------------------

class GeneratorRound(NamedTuple):
    generator: DiffModel
    synth_batch: torch.Tensor
    labels: torch.Tensor
    P: torch.Tensor
    losses: Dict[str, float]


def _synthetic_labels(batch_size: int, c: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.integers(0, c, size=batch_size), dtype=torch.long)


def train_generator_round(
    generator: DiffModel,
    client_models: Sequence[DiffModel],
    caps: Optional[CapabilityMatrices],
    global_model: DiffModel,
    cfg: DistillConfig,
    weights: GenLossWeights,
    seed: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
    ensembler: Optional[Ensembler] = None,
) -> GeneratorRound:
    """
    T_G pas d'optimisation du générateur sur un lot de bruits et d'étiquettes fixe.

    Le générateur passé en argument est mis à jour en place (avec son optimiseur,
    s'il est fourni) et retourné avec le lot synthétique final, ses étiquettes et
    les logits agrégés P (détachés).

    Raises:
        NonFiniteLossError: perte du générateur non finie
    """
    if ensembler is None:
        if caps is None:
            raise InvalidArgumentError("Matrices de capacité ou stratégie d'ensemble requises")
        ensembler = StratifiedEnsembler(caps)
    c = global_model.n_outputs
    params = generator.parameter_list()
    opt = optimizer if optimizer is not None else make_optimizer(cfg.generator_optimizer, params, cfg.generator_lr)
    z = sample_noise(cfg.batch_size, cfg.noise_dim, derive_seed(seed, 1))
    y = _synthetic_labels(cfg.batch_size, c, derive_seed(seed, 2))

    losses: Dict[str, float] = {}
    for t in range(cfg.generator_epochs):
        x_hat = generate(generator, z, y, Mode.TRAIN)
        objective = generator_objective(x_hat, y, client_models, ensembler, global_model, weights, cfg.temperature)
        if not torch.isfinite(objective.total):
            raise NonFiniteLossError(f"Perte du générateur non finie (pas {t})", {"step": t, **objective.values()})
        losses = objective.values()
        opt.zero_grad()
        apply_gradients(opt, params, objective.total)

    with torch.no_grad():
        x_hat = generate(generator, z, y, Mode.TRAIN)
        P = ensembler([forward_logits(model, x_hat, Mode.EVAL) for model in client_models], y)
    return GeneratorRound(generator, x_hat.detach(), y, P.detach(), losses)


@dataclass
class DistillationResult:
    """Modèle global distillé, générateur final et historique par époque globale."""

    global_model: DiffModel
    generator: DiffModel
    history: List[Dict[str, float]] = field(default_factory=list)
    accuracy_trace: List[float] = field(default_factory=list)


def run_distillation(
    client_models: Sequence[DiffModel],
    ensembler: Ensembler,
    cfg: DistillConfig,
    weights: GenLossWeights,
    seed: int,
    evaluator: Optional[Evaluator] = None,
    recorder: Optional[MetricsRecorder] = None,
    round_index: int = 0,
    global_model: Optional[DiffModel] = None,
) -> DistillationResult:
    """
    Alterne entraînement du générateur et distillation pendant T_g époques globales.

    Args:
        client_models: modèles clients (lecture seule)
        ensembler: stratégie d'ensemble des logits clients
        cfg: hyperparamètres de distillation
        weights: poids λ₁, λ₂
        seed: graine de l'initialisation et des lots synthétiques
        evaluator: précision top-1 du modèle global, appelée après chaque époque
        recorder: collecteur des métriques par époque
        round_index: indice de round pour les métriques
        global_model: point de départ du modèle global (copié) ; initialisation neuve sinon

    Returns:
        DistillationResult
    """
    if not client_models:
        raise InvalidArgumentError("Au moins un modèle client est requis")
    c = client_models[0].n_outputs
    d = client_models[0].input_dim
    for model in client_models[1:]:
        if model.n_outputs != c or model.input_dim != d:
            raise ShapeMismatchError("Les clients doivent partager dimension d'entrée et nombre de classes")

    student = global_model.clone() if global_model is not None else build_classifier(
        cfg.global_architecture, d, c, derive_seed(seed, 101)
    )
    generator = build_generator(cfg.noise_dim, c, d, derive_seed(seed, 102), conditional=cfg.conditional_generator)
    gen_opt = make_optimizer(cfg.generator_optimizer, generator.parameter_list(), cfg.generator_lr)
    student_opt = torch.optim.SGD(student.parameter_list(), lr=cfg.global_lr)
    result = DistillationResult(global_model=student, generator=generator)

    for epoch in range(cfg.global_epochs):
        round_ = train_generator_round(
            generator, client_models, None, student, cfg, weights,
            seed=derive_seed(seed, 103, epoch), optimizer=gen_opt, ensembler=ensembler,
        )
        for _ in range(cfg.distill_steps):
            logits = forward_logits(student, round_.synth_batch, Mode.TRAIN)
            total, kl, ce = distill_components(round_.P, logits, cfg.beta, cfg.temperature)
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"Perte de distillation non finie (époque {epoch})", {"epoch": epoch})
            student_opt.zero_grad()
            total.backward()
            student_opt.step()

        row = {**round_.losses, "distill_kl": float(kl.detach()), "distill_ce": float(ce.detach())}
        if evaluator is not None:
            row["test_top1"] = float(evaluator(student))
            result.accuracy_trace.append(row["test_top1"])
        result.history.append(row)
        if recorder is not None:
            for metric, value in row.items():
                recorder.record(Stage.DISTILL.value, round_index, epoch, metric, value)
        message = f"Époque globale {epoch} : " + ", ".join(f"{k}={v:.4f}" for k, v in row.items())
        if epoch % Settings.LOG_EVERY == 0 or epoch == cfg.global_epochs - 1:
            logger.info(message)
        else:
            logger.debug(message)

    return result


def fedhydra(
    client_models: Sequence[DiffModel],
    caps: CapabilityMatrices,
    cfg: DistillConfig,
    weights: GenLossWeights,
    seed: int,
    evaluator: Optional[Evaluator] = None,
    recorder: Optional[MetricsRecorder] = None,
    round_index: int = 0,
    global_model: Optional[DiffModel] = None,
) -> DistillationResult:
    """
    Distillation guidée par l'agrégation stratifiée.

    Raises:
        ShapeMismatchError: matrices de capacité incompatibles avec les clients
    """
    if caps.n_clients != len(client_models) or caps.n_classes != client_models[0].n_outputs:
        raise ShapeMismatchError(
            f"Capacités {caps.n_classes}×{caps.n_clients} pour {len(client_models)} clients "
            f"à {client_models[0].n_outputs} classes"
        )
    return run_distillation(
        client_models, StratifiedEnsembler(caps), cfg, weights, seed,
        evaluator=evaluator, recorder=recorder, round_index=round_index, global_model=global_model,
    )


# ---------------------------------------------------------------------------
# Rounds multiples
# ---------------------------------------------------------------------------

@dataclass
class MultiRoundResult:
    """Modèle global final, capacités et distillations de chaque round."""

    global_model: DiffModel
    capabilities: List[CapabilityMatrices] = field(default_factory=list)
    distillations: List[DistillationResult] = field(default_factory=list)
    round_top1: List[float] = field(default_factory=list)


def train_clients(
    partition: PartitionSpec,
    dataset: LabeledDataset,
    initial_models: Sequence[DiffModel],
    local_cfg: LocalTrainingConfig,
    seed: int,
    round_index: int = 0,
    recorder: Optional[MetricsRecorder] = None,
) -> List[DiffModel]:
    """Entraînement local de chaque client sur son fragment (ordre des identifiants)."""
    trained = []
    for k, (indices, model) in enumerate(zip(partition.client_indices, initial_models)):
        def on_epoch(epoch: int, loss: float, accuracy: float, k: int = k) -> None:
            if recorder is not None:
                recorder.record(Stage.LOCAL.value, round_index, epoch, f"client_{k}.loss", loss)
                recorder.record(Stage.LOCAL.value, round_index, epoch, f"client_{k}.train_acc", accuracy)

        bundle = ClientBundle(model=model, shard=dataset.subset(indices), client_id=k)
        trained.append(local_update(
            bundle, local_cfg.epochs, local_cfg.batch_size, local_cfg.lr,
            seed=derive_seed(seed, 202, round_index, k), on_epoch=on_epoch,
        ))
    return trained


def multi_round(
    partition: PartitionSpec,
    dataset: LabeledDataset,
    rounds: int,
    local_cfg: LocalTrainingConfig,
    cfg: DistillConfig,
    weights: GenLossWeights,
    seed: int,
    architectures: Sequence[str],
    method: Method = Method.FEDHYDRA,
    evaluator: Optional[Evaluator] = None,
    epsilon: float = 1e-8,
    recorder: Optional[MetricsRecorder] = None,
    strict: bool = False,
) -> MultiRoundResult:
    """
    R rounds de LocalUpdate → (stratification) → distillation.

    À partir du second round, chaque client repart d'une copie du modèle global
    lorsque son architecture est celle du modèle global, d'une initialisation neuve
    sinon ; la distillation repart du modèle global précédent.

    Args:
        method: Method.FEDHYDRA (agrégation stratifiée) ou Method.DENSE (moyenne)
        strict: lever une erreur sur une classe sans capacité de guidage

    Returns:
        MultiRoundResult
    """
    if rounds < 1:
        raise InvalidArgumentError(f"rounds doit être ≥ 1, reçu : {rounds}")
    if method not in (Method.FEDHYDRA, Method.DENSE):
        raise InvalidArgumentError(f"Méthode non distillée : {method}")
    architectures = list(architectures)
    if len(architectures) != partition.n_clients:
        raise InvalidArgumentError(f"{len(architectures)} architectures pour {partition.n_clients} clients")
    c, d = dataset.n_classes, dataset.feature_dim

    initial = initial_client_models(architectures, d, c, seed)
    global_model: Optional[DiffModel] = None
    result: Optional[MultiRoundResult] = None
    for r in range(rounds):
        if global_model is not None:
            initial = [
                global_model.clone() if tag == global_model.architecture_tag
                else build_classifier(tag, d, c, derive_seed(seed, 201, r, k))
                for k, tag in enumerate(architectures)
            ]
        started = time.perf_counter()
        with stage_context(Stage.LOCAL.value, round_index=r):
            clients = train_clients(partition, dataset, initial, local_cfg, seed, r, recorder)
        _timing(recorder, Stage.LOCAL, r, started)

        if method is Method.FEDHYDRA:
            started = time.perf_counter()
            with stage_context(Stage.STRATIFY.value, round_index=r):
                caps = model_stratification(
                    clients, c, cfg.generator_epochs, cfg.generator_lr, cfg.batch_size, epsilon,
                    seed=derive_seed(seed, 203, r), noise_dim=cfg.noise_dim, optimizer=cfg.generator_optimizer,
                    conditional=cfg.conditional_generator, strict=strict,
                )
            _timing(recorder, Stage.STRATIFY, r, started)
        else:
            caps = None

        started = time.perf_counter()
        with stage_context(Stage.DISTILL.value, round_index=r):
            if caps is not None:
                distilled = fedhydra(
                    clients, caps, cfg, weights, derive_seed(seed, 204, r),
                    evaluator=evaluator, recorder=recorder, round_index=r, global_model=global_model,
                )
            else:
                # server.baselines importe ce module
                from server.baselines import dense_distill
                distilled = dense_distill(
                    clients, cfg, weights, derive_seed(seed, 204, r),
                    evaluator=evaluator, recorder=recorder, round_index=r, global_model=global_model,
                )
        _timing(recorder, Stage.DISTILL, r, started)
        global_model = distilled.global_model

        if result is None:
            result = MultiRoundResult(global_model=global_model)
        result.global_model = global_model
        result.distillations.append(distilled)
        if caps is not None:
            result.capabilities.append(caps)
        if evaluator is not None:
            top1 = float(evaluator(global_model))
            result.round_top1.append(top1)
            if recorder is not None:
                recorder.record(Stage.ROUND.value, r, 0, "test_top1", top1)
            logger.info(f"Round {r} ({method.value}) : précision top-1 {top1:.4f}")

    return result


def _timing(recorder: Optional[MetricsRecorder], stage: Stage, round_index: int, started: float) -> None:
    if recorder is not None:
        recorder.timing(stage.value, round_index, time.perf_counter() - started)
