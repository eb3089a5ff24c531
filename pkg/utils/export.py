"""
Utilitaires d'export des résultats d'expérience (CSV, JSON, points de sauvegarde).
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from config.constants import METRIC_COLUMNS
from config.loader import config_from_dict
from config.settings import Settings
from data.datagen import heterogeneity_summary
from data.schemas import CapabilityMatrices, ExperimentResult, LabeledDataset, MetricRow, PartitionSpec
from models.nnkit import save_checkpoint
from utils.exceptions import ExportError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class CSVExporter:
    """Classe pour exporter les tableaux en CSV (UTF-8, fins de ligne LF)."""

    @staticmethod
    def metrics_frame(rows: List[MetricRow]) -> pd.DataFrame:
        """
        Tableau des métriques au schéma method,seed,round,epoch,stage,metric,value.

        Args:
            rows: lignes de métriques

        Returns:
            DataFrame (en-tête seul si aucune ligne)
        """
        return pd.DataFrame([row.as_tuple() for row in rows], columns=METRIC_COLUMNS)

    @staticmethod
    def write_frame(frame: pd.DataFrame, path: PathLike, index: bool = False) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=index, encoding="utf-8", lineterminator="\n")
        except OSError as e:
            logger.error(f"Écriture impossible : {path} ({e})")
            raise ExportError(f"Écriture impossible : {path} ({e})") from e
        return path

    @classmethod
    def write_metrics(cls, rows: List[MetricRow], path: PathLike) -> Path:
        return cls.write_frame(cls.metrics_frame(rows), path)

    @classmethod
    def write_capabilities(cls, caps: CapabilityMatrices, directory: PathLike) -> List[Path]:
        """Écrit caps_U.csv, caps_Ur.csv et caps_Uc.csv (c lignes × m colonnes client_k)."""
        directory = Path(directory)
        return [cls.write_frame(frame, directory / f"caps_{name}.csv") for name, frame in caps.to_frames().items()]


class JSONExporter:
    """Classe pour exporter les documents JSON."""

    @staticmethod
    def write(doc: Dict, path: PathLike) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as handle:
                json.dump(doc, handle, indent=2, sort_keys=True, ensure_ascii=False)
                handle.write("\n")
        except (OSError, TypeError) as e:
            logger.error(f"Écriture impossible : {path} ({e})")
            raise ExportError(f"Écriture impossible : {path} ({e})") from e
        return path


def write_partition(partition: PartitionSpec, dataset: LabeledDataset, directory: PathLike) -> List[Path]:
    """Écrit partition.json et la table des effectifs par client et par classe."""
    directory = Path(directory)
    paths = [JSONExporter.write(partition.to_dict(), directory / "partition.json")]
    paths.append(CSVExporter.write_frame(heterogeneity_summary(partition, dataset), directory / "class_counts.csv",
                                         index=True))
    return paths


def emit_results(result: ExperimentResult, output_dir: PathLike) -> Path:
    """
    Persiste une expérience : metrics.csv, timings.csv, results.json, matrices de
    capacité et points de sauvegarde des modèles globaux.

    Les matrices de la première graine au dernier tour sont écrites à la racine ;
    chaque (graine, tour) a sa copie sous seed_<s>/round_<r>/.

    Returns:
        Répertoire de sortie

    Raises:
        ExportError: écriture impossible
    """
    output_dir = Path(output_dir)
    CSVExporter.write_metrics(result.rows, output_dir / Settings.METRICS_FILE)
    CSVExporter.write_metrics(result.timings, output_dir / Settings.TIMINGS_FILE)
    JSONExporter.write(result.summary(), output_dir / Settings.RESULTS_FILE)

    if result.capabilities:
        for (seed, round_index), caps in sorted(result.capabilities.items()):
            CSVExporter.write_capabilities(caps, output_dir / f"seed_{seed}" / f"round_{round_index}")
        first_seed = next(s for s in result.config.seeds if any(k[0] == s for k in result.capabilities))
        last_round = max(r for s, r in result.capabilities if s == first_seed)
        CSVExporter.write_capabilities(result.capabilities[(first_seed, last_round)], output_dir)

    for (method, seed), model in sorted(result.global_models.items()):
        try:
            save_checkpoint(model, output_dir / Settings.CHECKPOINT_DIR / f"{method}_seed{seed}")
        except OSError as e:
            raise ExportError(f"Point de sauvegarde impossible ({method}, graine {seed}) : {e}") from e

    logger.info(f"Résultats écrits dans {output_dir} ({len(result.rows)} lignes de métriques)")
    return output_dir


def load_results(output_dir: PathLike) -> ExperimentResult:
    """
    Relit une expérience persistée par emit_results (métriques, résumé, capacités).

    Les modèles globaux ne sont pas rechargés.

    Raises:
        ExportError: fichiers absents ou illisibles
    """
    output_dir = Path(output_dir)
    try:
        with open(output_dir / Settings.RESULTS_FILE, "r", encoding="utf-8") as handle:
            summary = json.load(handle)
        metrics = pd.read_csv(output_dir / Settings.METRICS_FILE, encoding="utf-8")
    except (OSError, ValueError) as e:
        raise ExportError(f"Résultats illisibles dans {output_dir} : {e}") from e

    result = ExperimentResult(config=config_from_dict(summary["config"]))
    result.rows = [
        MetricRow(str(r.method), int(r.seed), int(r.round), int(r.epoch), str(r.stage), str(r.metric), float(r.value))
        for r in metrics.itertuples(index=False)
    ]
    result.final_top1 = {
        method: {int(seed): float(acc) for seed, acc in per_seed.items()}
        for method, per_seed in summary["final_top1"].items()
    }
    for round_dir in sorted(output_dir.glob("seed_*/round_*")):
        seed = int(round_dir.parent.name.split("_", 1)[1])
        round_index = int(round_dir.name.split("_", 1)[1])
        frames = {name: pd.read_csv(round_dir / f"caps_{name}.csv") for name in ("U", "Ur", "Uc")}
        result.capabilities[(seed, round_index)] = CapabilityMatrices(
            U=frames["U"].to_numpy(dtype=float),
            U_row=frames["Ur"].to_numpy(dtype=float),
            U_col=frames["Uc"].to_numpy(dtype=float),
            epsilon=result.config.epsilon,
        )
    return result
