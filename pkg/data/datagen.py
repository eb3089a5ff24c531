"""
Génération de jeux de données synthétiques et partitionnement entre clients.

Les fonctions sont pures : elles ne dépendent que de leurs arguments et de la graine.
"""
import logging
from typing import List, Optional

import numpy as np
import pandas as pd

from config.constants import Scenario
from data.schemas import LabeledDataset, PartitionSpec
from utils.exceptions import InvalidArgumentError, PartitionError

logger = logging.getLogger(__name__)


def class_means(n_classes: int, feature_dim: int, separation: float = 3.0) -> np.ndarray:
    """
    Centres des classes.

    Sommets d'un simplexe mis à l'échelle (separation · e_j) lorsque la dimension le
    permet, sinon points répartis sur un cercle de rayon `separation` dans les deux
    premières coordonnées.

    Returns:
        Matrice (c × feature_dim)
    """
    means = np.zeros((n_classes, feature_dim))
    if feature_dim >= n_classes:
        means[np.arange(n_classes), np.arange(n_classes)] = separation
    else:
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        means[:, 0] = separation * np.cos(angles)
        means[:, 1] = separation * np.sin(angles)
    return means


def make_synthetic_dataset(
    c: int,
    n_per_class: int,
    feature_dim: int,
    spread: float,
    seed: int,
    separation: float = 3.0,
) -> LabeledDataset:
    """
    Construit un jeu de blobs gaussiens isotropes, un blob par classe.

    Args:
        c: nombre de classes (≥ 2)
        n_per_class: échantillons par classe (≥ 1)
        feature_dim: dimension des caractéristiques (≥ 2)
        spread: écart-type des blobs (0 place les points sur les centres)
        seed: graine
        separation: échelle des centres de classe

    Returns:
        Jeu de c · n_per_class échantillons, rangés classe par classe

    Raises:
        InvalidArgumentError: comptes non positifs ou dispersion négative
    """
    if c < 2:
        raise InvalidArgumentError(f"c doit être ≥ 2, reçu : {c}")
    if n_per_class < 1:
        raise InvalidArgumentError(f"n_per_class doit être ≥ 1, reçu : {n_per_class}")
    if feature_dim < 2:
        raise InvalidArgumentError(f"feature_dim doit être ≥ 2, reçu : {feature_dim}")
    if spread < 0:
        raise InvalidArgumentError(f"spread doit être ≥ 0, reçu : {spread}")

    rng = np.random.default_rng(seed)
    means = class_means(c, feature_dim, separation)
    labels = np.repeat(np.arange(c, dtype=np.int64), n_per_class)
    noise = rng.normal(0.0, 1.0, size=(c * n_per_class, feature_dim))
    features = means[labels] + spread * noise

    logger.info(f"Jeu synthétique construit : {c} classes × {n_per_class} échantillons, dim {feature_dim}")
    return LabeledDataset(features=features, labels=labels, n_classes=c)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Arrondit total · proportions en entiers de somme exacte `total`."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _draw_proportions(rng: np.random.Generator, alpha: float, m: int) -> np.ndarray:
    proportions = rng.dirichlet(np.full(m, alpha))
    if not np.all(np.isfinite(proportions)) or proportions.sum() <= 0:
        # Limite α → 0 : toute la masse sur un seul client
        proportions = np.zeros(m)
        proportions[rng.integers(m)] = 1.0
    return proportions / proportions.sum()


def partition_dirichlet(
    dataset: LabeledDataset,
    m: int,
    alpha: float,
    seed: int,
    max_retries: int = 100,
) -> PartitionSpec:
    """
    Répartit chaque classe entre m clients selon des proportions tirées de Dir(α).

    Toute partition laissant un client vide est retirée entièrement (au plus
    `max_retries` nouveaux tirages).

    Raises:
        InvalidArgumentError: m < 1 ou α ≤ 0
        PartitionError: tirages épuisés avec un client vide
    """
    if m < 1:
        raise InvalidArgumentError(f"m doit être ≥ 1, reçu : {m}")
    if alpha <= 0:
        raise InvalidArgumentError(f"alpha doit être > 0, reçu : {alpha}")

    if m == 1:
        return PartitionSpec([list(range(dataset.n_samples))], Scenario.DIRICHLET, alpha, seed)

    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == j) for j in range(dataset.n_classes)]

    for attempt in range(max_retries + 1):
        buckets: List[List[int]] = [[] for _ in range(m)]
        for indices in by_class:
            shuffled = rng.permutation(indices)
            counts = _largest_remainder(_draw_proportions(rng, alpha, m), len(shuffled))
            start = 0
            for k, count in enumerate(counts):
                buckets[k].extend(int(i) for i in shuffled[start:start + count])
                start += count
        if all(buckets):
            if attempt:
                logger.warning(f"Partition Dirichlet obtenue après {attempt} nouveau(x) tirage(s)")
            return PartitionSpec([sorted(b) for b in buckets], Scenario.DIRICHLET, alpha, seed)

    logger.error(f"Partition Dirichlet impossible sans client vide (α={alpha}, m={m})")
    raise PartitionError(
        f"Client vide après {max_retries} nouveaux tirages (α={alpha}, m={m})"
    )


def partition_two_class(dataset: LabeledDataset, m: int) -> PartitionSpec:
    """
    Scénario 2c/c : le client k reçoit toutes les données des classes 2k et 2k+1.

    Raises:
        InvalidArgumentError: si 2·m ≠ c
    """
    if 2 * m != dataset.n_classes:
        raise InvalidArgumentError(f"2·m doit valoir c : m={m}, c={dataset.n_classes}")
    client_indices = [
        np.flatnonzero((dataset.labels == 2 * k) | (dataset.labels == 2 * k + 1)).tolist()
        for k in range(m)
    ]
    return PartitionSpec(client_indices, Scenario.TWO_CLASS)


def partition_iid(dataset: LabeledDataset, m: int, seed: int) -> PartitionSpec:
    """
    Partition IID stratifiée : chaque classe est découpée en m parts quasi égales.

    Raises:
        InvalidArgumentError: m < 1
    """
    if m < 1:
        raise InvalidArgumentError(f"m doit être ≥ 1, reçu : {m}")
    rng = np.random.default_rng(seed)
    buckets: List[List[int]] = [[] for _ in range(m)]
    for j in range(dataset.n_classes):
        shuffled = rng.permutation(np.flatnonzero(dataset.labels == j))
        # Rotation du point de départ : les parts plus grandes ne tombent pas toujours sur les premiers clients
        for offset, part in enumerate(np.array_split(shuffled, m)):
            buckets[(offset + j) % m].extend(int(i) for i in part)
    if not all(buckets):
        raise PartitionError(f"Trop peu d'échantillons ({dataset.n_samples}) pour {m} clients")
    return PartitionSpec([sorted(b) for b in buckets], Scenario.IID, None, seed)


def make_partition(
    dataset: LabeledDataset,
    scenario: Scenario,
    m: int,
    seed: int,
    alpha: Optional[float] = None,
    max_retries: int = 100,
) -> PartitionSpec:
    """Aiguille vers le partitionneur du scénario demandé."""
    if scenario == Scenario.DIRICHLET:
        if alpha is None:
            raise InvalidArgumentError("alpha requis pour le scénario dirichlet")
        return partition_dirichlet(dataset, m, alpha, seed, max_retries)
    if scenario == Scenario.TWO_CLASS:
        return partition_two_class(dataset, m)
    return partition_iid(dataset, m, seed)


def heterogeneity_summary(partition: PartitionSpec, dataset: LabeledDataset) -> pd.DataFrame:
    """
    Table des effectifs par client et par classe.

    Returns:
        DataFrame entier (m × c), index client_k, colonnes class_j
    """
    table = np.stack([
        np.bincount(dataset.labels[np.asarray(indices, dtype=np.int64)], minlength=dataset.n_classes)
        for indices in partition.client_indices
    ])
    return pd.DataFrame(
        table,
        index=[f"client_{k}" for k in range(partition.n_clients)],
        columns=[f"class_{j}" for j in range(dataset.n_classes)],
    )


def label_entropy(partition: PartitionSpec, dataset: LabeledDataset) -> np.ndarray:
    """Entropie (nats) de la distribution des étiquettes de chaque client."""
    counts = heterogeneity_summary(partition, dataset).to_numpy().astype(float)
    shares = counts / counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(shares > 0, -shares * np.log(shares), 0.0)
    return terms.sum(axis=1)
