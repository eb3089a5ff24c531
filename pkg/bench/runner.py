"""
Orchestration des expériences : données, partition, méthodes, évaluation et
persistance, pour chaque graine.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from joblib import Parallel, delayed
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from bench.evaluation import evaluate_top1
from config.constants import ABLATION_GRID, Method, Scenario
from config.settings import Settings
from data.datagen import make_partition, make_synthetic_dataset
from data.schemas import (
    CapabilityMatrices, ExperimentConfig, ExperimentResult, LabeledDataset, MetricRow,
    MetricsRecorder, PartitionSpec
)
from data.validator import ConfigValidator
from models.client import initial_client_models
from models.nnkit import DiffModel
from server.baselines import fedavg_rounds
from server.hasa import multi_round, train_clients
from server.stratify import model_stratification
from utils.exceptions import stage_context
from utils.export import emit_results
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class SeedOutcome:
    """Résultats d'une graine, fusionnés ensuite dans ExperimentResult."""

    seed: int
    rows: List[MetricRow] = field(default_factory=list)
    timings: List[MetricRow] = field(default_factory=list)
    final_top1: Dict[str, float] = field(default_factory=dict)
    capabilities: Dict[Tuple[int, int], CapabilityMatrices] = field(default_factory=dict)
    global_models: Dict[Tuple[str, int], DiffModel] = field(default_factory=dict)


def build_datasets(cfg: ExperimentConfig, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Jeu d'entraînement et jeu de test, tirés de la même distribution."""
    train = make_synthetic_dataset(
        cfg.n_classes, cfg.n_per_class, cfg.feature_dim, cfg.spread, derive_seed(seed, 11), cfg.separation
    )
    n_test = max(1, int(round(cfg.test_fraction * cfg.n_per_class)))
    test = make_synthetic_dataset(
        cfg.n_classes, n_test, cfg.feature_dim, cfg.spread, derive_seed(seed, 12), cfg.separation
    )
    return train, test


def build_partition(cfg: ExperimentConfig, dataset: LabeledDataset, seed: int) -> PartitionSpec:
    return make_partition(
        dataset, cfg.scenario, cfg.clients, derive_seed(seed, 13),
        alpha=cfg.alpha if cfg.scenario == Scenario.DIRICHLET else None,
        max_retries=cfg.max_retries,
    )


class ExperimentRunner:
    """
    Exécute toutes les méthodes demandées pour chaque graine.

    Les graines sont indépendantes et tournent en parallèle (fils joblib, limités
    par OSFL_LAB_THREADS) ; leurs résultats sont fusionnés dans l'ordre des graines.
    """

    def __init__(self, cfg: ExperimentConfig, n_jobs: Optional[int] = None):
        ConfigValidator.check(cfg)
        self.cfg = cfg
        self.n_jobs = n_jobs or Settings.get_threads()

    def run_seed(self, seed: int) -> SeedOutcome:
        cfg = self.cfg
        outcome = SeedOutcome(seed=seed)
        with stage_context("data", seed=seed):
            train, test = build_datasets(cfg, seed)
            partition = build_partition(cfg, train, seed)
        architectures = cfg.client_architectures()

        def evaluator(model: DiffModel) -> float:
            return evaluate_top1(model, test)

        for method in cfg.methods:
            recorder = MetricsRecorder(method.value, seed)
            with stage_context(method.value, seed=seed):
                if method is Method.FEDAVG:
                    if cfg.is_heterogeneous:
                        logger.warning(f"FedAvg ignoré (graine {seed}) : architectures hétérogènes {architectures}")
                        continue
                    model = fedavg_rounds(
                        partition, train, cfg.rounds, cfg.local_config(), seed, architectures[0],
                        evaluator=evaluator, recorder=recorder,
                    )
                else:
                    rounds = multi_round(
                        partition, train, cfg.rounds, cfg.local_config(), cfg.distill_config(),
                        cfg.loss_weights(), seed, architectures, method=method,
                        evaluator=evaluator, epsilon=cfg.epsilon, recorder=recorder,
                    )
                    model = rounds.global_model
                    if method is Method.FEDHYDRA:
                        for r, caps in enumerate(rounds.capabilities):
                            outcome.capabilities[(seed, r)] = caps
                top1 = evaluate_top1(model, test)
            outcome.rows.extend(recorder.rows)
            outcome.timings.extend(recorder.timings)
            outcome.final_top1[method.value] = top1
            outcome.global_models[(method.value, seed)] = model
            logger.info(f"Graine {seed}, méthode {method.value} : précision top-1 finale {top1:.4f}")
        return outcome

    def run(self) -> ExperimentResult:
        cfg = self.cfg
        logger.info(f"Expérience {cfg.config_hash()} : {len(cfg.seeds)} graine(s), méthodes "
                    f"{[m.value for m in cfg.methods]}")
        workers = min(self.n_jobs, len(cfg.seeds))
        outcomes = Parallel(n_jobs=workers, prefer="threads")(delayed(self.run_seed)(s) for s in cfg.seeds)

        result = ExperimentResult(config=cfg)
        for outcome in sorted(outcomes, key=lambda o: cfg.seeds.index(o.seed)):
            result.rows.extend(outcome.rows)
            result.timings.extend(outcome.timings)
            for method, top1 in outcome.final_top1.items():
                result.final_top1.setdefault(method, {})[outcome.seed] = top1
            result.capabilities.update(outcome.capabilities)
            result.global_models.update(outcome.global_models)
        return result


def run_experiment(cfg: ExperimentConfig, persist: bool = True, n_jobs: Optional[int] = None) -> ExperimentResult:
    """
    Exécute une expérience complète et, par défaut, écrit ses résultats dans cfg.output_dir.

    Raises:
        ConfigValidationError: configuration invalide
        StageError: erreur d'un sous-module, avec l'étape et la graine
    """
    result = ExperimentRunner(cfg, n_jobs).run()
    if persist:
        emit_results(result, cfg.output_dir)
    return result


def run_ablation(
    cfg: ExperimentConfig,
    grid: Sequence[Tuple[float, float]] = tuple(ABLATION_GRID),
    n_jobs: Optional[int] = None,
) -> pd.DataFrame:
    """
    Précision finale de FedHydra pour chaque couple (λ₁, λ₂) de la grille.

    Returns:
        DataFrame (lambda1, lambda2, seed, top1), une ligne par couple et par graine
    """
    records = []
    for lambda1, lambda2 in grid:
        variant = replace(cfg, lambda1=lambda1, lambda2=lambda2, methods=[Method.FEDHYDRA])
        result = run_experiment(variant, persist=False, n_jobs=n_jobs)
        for seed, top1 in result.final_top1[Method.FEDHYDRA.value].items():
            records.append({"lambda1": lambda1, "lambda2": lambda2, "seed": seed, "top1": top1})
        logger.info(f"Ablation λ₁={lambda1}, λ₂={lambda2} : {result.mean_top1()[Method.FEDHYDRA.value]:.4f}")
    return pd.DataFrame.from_records(records, columns=["lambda1", "lambda2", "seed", "top1"])


def measure_stratification_scaling(
    cfg: ExperimentConfig,
    client_counts: Sequence[int] = (2, 4, 8),
    seed: int = 0,
) -> Tuple[pd.DataFrame, float]:
    """
    Durée de model_stratification pour plusieurs nombres de clients, à c et T_G fixés,
    et qualité (R²) d'un ajustement linéaire en m·c.

    Les clients reçoivent une partition IID, le coût de la stratification ne
    dépendant pas de la répartition des données.
    """
    train, _ = build_datasets(cfg, seed)
    distill = cfg.distill_config()
    records = []
    for m in client_counts:
        partition = make_partition(train, Scenario.IID, m, derive_seed(seed, 13, m))
        initial = initial_client_models([cfg.client_architectures()[0]] * m, cfg.feature_dim, cfg.n_classes, seed)
        clients = train_clients(partition, train, initial, cfg.local_config(), seed)
        started = time.perf_counter()
        model_stratification(
            clients, cfg.n_classes, distill.generator_epochs, distill.generator_lr, distill.batch_size,
            cfg.epsilon, seed=seed, noise_dim=distill.noise_dim, optimizer=distill.generator_optimizer,
            conditional=distill.conditional_generator, n_jobs=1,
        )
        seconds = time.perf_counter() - started
        records.append({"clients": m, "classes": cfg.n_classes, "cells": m * cfg.n_classes, "seconds": seconds})
        logger.info(f"Stratification m={m}, c={cfg.n_classes} : {seconds:.3f} s")

    frame = pd.DataFrame.from_records(records, columns=["clients", "classes", "cells", "seconds"])
    X = frame[["cells"]].to_numpy(dtype=float)
    y = frame["seconds"].to_numpy(dtype=float)
    fit = LinearRegression().fit(X, y)
    r2 = float(r2_score(y, fit.predict(X))) if len(frame) > 2 else 1.0
    return frame, r2
