"""
Configuration centralisée du laboratoire.
"""
import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)


class Settings:
    """Classe de configuration de l'application."""

    # Chemins
    BASE_DIR = Path(__file__).parent.parent
    DEFAULT_OUTPUT_DIR = BASE_DIR / "runs"

    # Parallélisme
    THREADS_ENV = "OSFL_LAB_THREADS"
    DEFAULT_THREADS = 1

    # Logging
    LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s : %(message)s"
    LOG_EVERY = 10  # époques de distillation entre deux messages INFO

    # Fichiers produits
    METRICS_FILE = "metrics.csv"
    TIMINGS_FILE = "timings.csv"
    RESULTS_FILE = "results.json"
    CHECKPOINT_DIR = "checkpoints"
    MANIFEST_FILE = "manifest.json"
    PARAMETERS_FILE = "parameters.f64"

    # Messages
    MESSAGES = {
        "run_done": "✅ Expérience terminée : résultats écrits dans {path}",
        "partition_done": "✅ Partition écrite dans {path}",
        "stratify_done": "✅ Matrices de capacité écrites dans {path}",
        "plot_done": "✅ {count} figure(s) écrite(s) dans {path}",
        "ablation_done": "✅ Ablation terminée : {path}",
        "scaling_done": "✅ Coût de la stratification : R² = {r2:.3f} ({path})",
        "lab_error": "❌ Erreur : {error}",
        "unexpected_error": "❌ Une erreur inattendue s'est produite : {error}",
    }

    @classmethod
    def get_threads(cls) -> int:
        """Retourne le nombre maximal d'exécutions parallèles (variable OSFL_LAB_THREADS)."""
        raw = os.environ.get(cls.THREADS_ENV)
        if raw is None or raw.strip() == "":
            return cls.DEFAULT_THREADS
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"{cls.THREADS_ENV} invalide ({raw!r}), utilisation de {cls.DEFAULT_THREADS}")
            return cls.DEFAULT_THREADS

    @classmethod
    def get_output_dir(cls) -> str:
        """Retourne le répertoire de sortie par défaut."""
        return str(cls.DEFAULT_OUTPUT_DIR)
