"""
Exceptions personnalisées pour le laboratoire d'apprentissage fédéré one-shot.
"""
import logging
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional

logger = logging.getLogger(__name__)


class OSFLLabError(Exception):
    """Exception de base pour toutes les erreurs du laboratoire."""
    pass


class InvalidArgumentError(OSFLLabError):
    """Argument invalide (compte non positif, dimension incohérente...)."""
    pass


class PartitionError(OSFLLabError):
    """Échec du partitionnement (client vide après épuisement des tirages)."""
    pass


class ShapeMismatchError(OSFLLabError):
    """Dimensions incompatibles entre un lot et un modèle."""
    pass


class UnknownArchitectureError(OSFLLabError):
    """Architecture absente du registre."""
    pass


class NonFiniteLossError(OSFLLabError):
    """Perte NaN ou infinie pendant un calcul de gradient."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoBatchNormError(OSFLLabError):
    """Le modèle ne contient aucune couche de batch-normalisation."""
    pass


class BatchTooSmallError(OSFLLabError):
    """Lot trop petit pour calculer des statistiques de batch."""
    pass


class LabelOutOfRangeError(OSFLLabError):
    """Étiquette hors de l'intervalle [0, c)."""
    pass


class ArchitectureMismatchError(OSFLLabError):
    """Architectures différentes là où elles doivent être identiques (FedAvg)."""
    pass


class DegenerateCapabilityError(OSFLLabError):
    """Ligne de U entièrement nulle en mode strict."""
    pass


class ConfigValidationError(OSFLLabError):
    """Erreur de validation de la configuration d'expérience."""
    pass


class ExportError(OSFLLabError):
    """Erreur d'écriture des résultats."""
    pass


class StageError(OSFLLabError):
    """Erreur d'un sous-module, enrichie du contexte de l'étape."""

    def __init__(self, stage: str, cause: Exception, seed: Optional[int] = None,
                 round_index: Optional[int] = None):
        context = f"étape '{stage}'"
        if seed is not None:
            context += f", graine {seed}"
        if round_index is not None:
            context += f", tour {round_index}"
        super().__init__(f"Échec à l'{context} : {cause}")
        self.stage = stage
        self.cause = cause
        self.seed = seed
        self.round_index = round_index


@contextmanager
def stage_context(stage: str, seed: Optional[int] = None, round_index: Optional[int] = None) -> Iterator[None]:
    """
    Ré-émet les erreurs du laboratoire levées dans le bloc sous forme de StageError.

    Une StageError déjà contextualisée est conservée ; la graine lui est ajoutée si
    elle manquait.
    """
    try:
        yield
    except StageError as e:
        if e.seed is None and seed is not None:
            raise StageError(e.stage, e.cause, seed, e.round_index) from e.cause
        raise
    except OSFLLabError as e:
        logger.error(f"Erreur à l'étape '{stage}' (graine {seed}, tour {round_index}) : {e}")
        raise StageError(stage, e, seed, round_index) from e
