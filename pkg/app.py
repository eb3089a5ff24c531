"""
Laboratoire d'apprentissage fédéré one-shot : interface en ligne de commande.

Sous-commandes : partition, stratify, run, plot, ablate, scaling.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from bench.runner import (
    build_datasets, build_partition, measure_stratification_scaling, run_ablation, run_experiment
)
from config.loader import apply_overrides, load_config
from config.settings import Settings
from data.schemas import ExperimentConfig
from models.client import initial_client_models
from server.hasa import train_clients
from server.stratify import model_stratification
from ui.visualizations import plot_curves
from utils.exceptions import OSFLLabError
from utils.export import CSVExporter, load_results, write_partition
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """Construit l'analyseur d'arguments et ses sous-commandes."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="fichier YAML de configuration")
    common.add_argument("--output", help="répertoire de sortie")
    common.add_argument("--seeds", help="graines séparées par des virgules (ex. 0,1,2)")
    common.add_argument("--method", action="append", dest="methods", help="méthode (répétable)")
    common.add_argument("--alpha", type=float, help="concentration de Dirichlet")
    common.add_argument("--clients", type=int, help="nombre de clients")
    common.add_argument("--rounds", type=int, help="nombre de rounds")
    common.add_argument("--log-level", default="INFO", help="niveau de journalisation")

    parser = argparse.ArgumentParser(prog="osfl-lab", description="Laboratoire d'apprentissage fédéré one-shot")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("partition", parents=[common], help="tire et écrit la partition de la première graine")
    sub.add_parser("stratify", parents=[common], help="entraîne les clients et écrit les matrices de capacité")
    sub.add_parser("run", parents=[common], help="exécute l'expérience complète")
    sub.add_parser("plot", parents=[common], help="trace les figures d'une expérience persistée")
    sub.add_parser("ablate", parents=[common], help="balaie la grille (λ₁, λ₂)")
    scaling = sub.add_parser("scaling", parents=[common], help="mesure le coût de la stratification")
    scaling.add_argument("--client-counts", default="2,4,8", help="nombres de clients (ex. 2,4,8)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Configuration du fichier (ou par défaut) surchargée par les options de la ligne de commande."""
    cfg = load_config(args.config)
    output = args.output
    if output is None and args.config is None:
        output = Settings.get_output_dir()
    return apply_overrides(
        cfg, output_dir=output, seeds=args.seeds, methods=args.methods,
        alpha=args.alpha, clients=args.clients, rounds=args.rounds,
    )


def cmd_partition(cfg: ExperimentConfig) -> str:
    seed = cfg.seeds[0]
    train, _ = build_datasets(cfg, seed)
    write_partition(build_partition(cfg, train, seed), train, cfg.output_dir)
    return Settings.MESSAGES["partition_done"].format(path=cfg.output_dir)


def cmd_stratify(cfg: ExperimentConfig) -> str:
    seed = cfg.seeds[0]
    train, _ = build_datasets(cfg, seed)
    partition = build_partition(cfg, train, seed)
    initial = initial_client_models(cfg.client_architectures(), cfg.feature_dim, cfg.n_classes, seed)
    clients = train_clients(partition, train, initial, cfg.local_config(), seed)
    distill = cfg.distill_config()
    caps = model_stratification(
        clients, cfg.n_classes, distill.generator_epochs, distill.generator_lr, distill.batch_size,
        cfg.epsilon, seed=derive_seed(seed, 203, 0), noise_dim=distill.noise_dim,
        optimizer=distill.generator_optimizer, conditional=distill.conditional_generator,
    )
    CSVExporter.write_capabilities(caps, cfg.output_dir)
    return Settings.MESSAGES["stratify_done"].format(path=cfg.output_dir)


def cmd_run(cfg: ExperimentConfig) -> str:
    run_experiment(cfg)
    return Settings.MESSAGES["run_done"].format(path=cfg.output_dir)


def cmd_plot(cfg: ExperimentConfig) -> str:
    paths = plot_curves(load_results(cfg.output_dir), cfg.output_dir)
    return Settings.MESSAGES["plot_done"].format(count=len(paths), path=cfg.output_dir)


def cmd_ablate(cfg: ExperimentConfig) -> str:
    path = CSVExporter.write_frame(run_ablation(cfg), Path(cfg.output_dir) / "ablation.csv")
    return Settings.MESSAGES["ablation_done"].format(path=path)


def cmd_scaling(cfg: ExperimentConfig, client_counts: str) -> str:
    counts = [int(part) for part in client_counts.split(",") if part.strip()]
    frame, r2 = measure_stratification_scaling(cfg, counts, seed=cfg.seeds[0])
    path = CSVExporter.write_frame(frame, Path(cfg.output_dir) / "scaling.csv")
    return Settings.MESSAGES["scaling_done"].format(r2=r2, path=path)


COMMANDS = {
    "partition": cmd_partition,
    "stratify": cmd_stratify,
    "run": cmd_run,
    "plot": cmd_plot,
    "ablate": cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Fonction principale de l'application."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format=Settings.LOG_FORMAT)
    try:
        cfg = resolve_config(args)
        if args.command == "scaling":
            message = cmd_scaling(cfg, args.client_counts)
        else:
            message = COMMANDS[args.command](cfg)
    except OSFLLabError as e:
        print(Settings.MESSAGES["lab_error"].format(error=e), file=sys.stderr)
        logger.error(f"Erreur du laboratoire : {e}")
        return 1
    except Exception as e:
        print(Settings.MESSAGES["unexpected_error"].format(error=e), file=sys.stderr)
        logger.exception(f"Erreur inattendue : {e}")
        return 2
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
