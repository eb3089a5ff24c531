"""
Stratification des modèles : mesure de la capacité de guidage de chaque modèle client
pour chaque classe, puis normalisations par ligne et par colonne.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed

from config.constants import GeneratorOptimizer, Mode
from config.settings import Settings
from data.schemas import CapabilityMatrices, LossTrace
from models.nnkit import (
    DiffModel, apply_gradients, build_generator, forward_logits, generate,
    make_optimizer, sample_noise
)
from utils.exceptions import (
    DegenerateCapabilityError, InvalidArgumentError, LabelOutOfRangeError, NonFiniteLossError
)
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def guidance_loss_trace(
    client_model: DiffModel,
    class_j: int,
    gen_seed: int,
    T_G: int,
    eta_G: float,
    b: int,
    noise_dim: int = 16,
    optimizer: GeneratorOptimizer = GeneratorOptimizer.ADAM,
    conditional: bool = True,
    client_id: int = 0,
) -> LossTrace:
    """
    Entraîne un générateur neuf sous la seule supervision d'un modèle client pour la
    classe j et enregistre la perte CE à chaque itération.

    Le lot de bruits est tiré une fois et réutilisé pendant les T_G itérations.
    Les paramètres du modèle client ne sont jamais modifiés.

    Raises:
        LabelOutOfRangeError: classe hors de [0, c)
        InvalidArgumentError: T_G < 2 ou b < 2
        NonFiniteLossError: perte non finie
    """
    c = client_model.n_outputs
    if not 0 <= class_j < c:
        raise LabelOutOfRangeError(f"Classe {class_j} hors de [0, {c})")
    if T_G < 2:
        raise InvalidArgumentError(f"T_G doit être ≥ 2, reçu : {T_G}")
    if b < 2:
        raise InvalidArgumentError(f"b doit être ≥ 2, reçu : {b}")

    generator = build_generator(noise_dim, c, client_model.input_dim, gen_seed, conditional=conditional)
    params = generator.parameter_list()
    opt = make_optimizer(optimizer, params, eta_G)
    z = sample_noise(b, noise_dim, derive_seed(gen_seed, 1))
    y = torch.full((b,), class_j, dtype=torch.long)

    values = np.empty(T_G)
    for t in range(T_G):
        x_hat = generate(generator, z, y, Mode.TRAIN)
        loss = F.cross_entropy(forward_logits(client_model, x_hat, Mode.EVAL), y)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"Perte non finie (client {client_id}, classe {class_j}, itération {t})",
                {"client_id": client_id, "class_id": class_j, "iteration": t},
            )
        values[t] = float(loss.detach())
        opt.zero_grad()
        apply_gradients(opt, params, loss)

    return LossTrace(values=values, client_id=client_id, class_id=class_j)


def guidance_capability(trace: LossTrace, epsilon: float = 1e-8) -> float:
    """Capacité de guidage u = (max L − min L) / (min L + ε)."""
    values = np.asarray(trace.values)
    low = float(values.min())
    return (float(values.max()) - low) / (low + epsilon)


def normalize_capabilities(U: np.ndarray, epsilon: float = 1e-8, strict: bool = False) -> CapabilityMatrices:
    """
    Normalise U (c × m) par ligne (Ū_r, somme sur les clients) et par colonne
    (Ū_c, somme sur les classes).

    Une ligne (ou colonne) entièrement nulle reçoit des poids uniformes, avec un
    avertissement ; en mode strict elle lève DegenerateCapabilityError.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or np.any(~np.isfinite(U)) or np.any(U < 0):
        raise InvalidArgumentError("U doit être une matrice finie à valeurs positives")
    c, m = U.shape

    row_sums = U.sum(axis=1, keepdims=True)
    dead_rows = np.flatnonzero(row_sums[:, 0] == 0)
    if dead_rows.size:
        if strict:
            raise DegenerateCapabilityError(f"Aucun client ne guide les classes {dead_rows.tolist()}")
        logger.warning(f"Classes sans capacité de guidage {dead_rows.tolist()} : poids uniformes 1/{m}")
    U_row = np.divide(U, row_sums, out=np.full_like(U, 1.0 / m), where=row_sums > 0)

    col_sums = U.sum(axis=0, keepdims=True)
    dead_cols = np.flatnonzero(col_sums[0] == 0)
    if dead_cols.size:
        logger.warning(f"Clients sans capacité de guidage {dead_cols.tolist()} : poids uniformes 1/{c}")
    U_col = np.divide(U, col_sums, out=np.full_like(U, 1.0 / c), where=col_sums > 0)

    return CapabilityMatrices(U=U, U_row=U_row, U_col=U_col, epsilon=epsilon)


def model_stratification(
    client_models: Sequence[DiffModel],
    c: int,
    T_G: int,
    eta_G: float,
    b: int,
    epsilon: float = 1e-8,
    seed: int = 0,
    client_ids: Optional[Sequence[int]] = None,
    noise_dim: int = 16,
    optimizer: GeneratorOptimizer = GeneratorOptimizer.ADAM,
    conditional: bool = True,
    strict: bool = False,
    n_jobs: Optional[int] = None,
) -> CapabilityMatrices:
    """
    Remplit U (classes × clients) avec u_{k,j} pour les m·c paires puis calcule
    Ū_r et Ū_c.

    La graine du générateur de la paire (k, j) dérive de (seed, identifiant du client, j) :
    permuter la liste des clients (avec leurs identifiants) permute les colonnes.

    Args:
        client_models: modèles clients convergés
        c: nombre de classes
        T_G: itérations du générateur par paire
        eta_G: taux d'apprentissage du générateur
        b: taille du lot de bruits
        epsilon: constante ε de la capacité
        seed: graine de l'expérience
        client_ids: identifiants stables des clients (par défaut 0..m-1)
        strict: lever une erreur sur une ligne dégénérée au lieu de l'uniformiser
        n_jobs: nombre de fils (par défaut Settings.get_threads())

    Returns:
        Matrices de capacité
    """
    m = len(client_models)
    if m < 1:
        raise InvalidArgumentError("Au moins un modèle client est requis")
    ids: List[int] = list(range(m)) if client_ids is None else [int(k) for k in client_ids]
    if len(ids) != m:
        raise InvalidArgumentError(f"{len(ids)} identifiants pour {m} clients")
    for k, model in enumerate(client_models):
        if model.n_outputs != c:
            raise InvalidArgumentError(f"Le client {ids[k]} produit {model.n_outputs} logits, attendu {c}")

    def cell(position: int, j: int) -> float:
        trace = guidance_loss_trace(
            client_models[position], j, derive_seed(seed, ids[position], j), T_G, eta_G, b,
            noise_dim=noise_dim, optimizer=optimizer, conditional=conditional, client_id=ids[position],
        )
        u = guidance_capability(trace, epsilon)
        logger.debug(f"Cellule (client {ids[position]}, classe {j}) : u = {u:.4g}")
        return u

    pairs = [(position, j) for j in range(c) for position in range(m)]
    workers = n_jobs or Settings.get_threads()
    values = Parallel(n_jobs=workers, prefer="threads")(delayed(cell)(position, j) for position, j in pairs)

    U = np.zeros((c, m))
    for (position, j), u in zip(pairs, values):
        U[j, position] = u
    caps = normalize_capabilities(U, epsilon, strict)
    logger.info(f"Stratification terminée : {m} clients × {c} classes, T_G={T_G}")
    return caps
