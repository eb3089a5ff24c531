"""
Lecture des fichiers de configuration d'expérience (YAML plat clé-valeur).
"""
import logging
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from config.constants import GeneratorOptimizer, Method, Scenario
from data.schemas import ExperimentConfig
from data.validator import ConfigValidator
from utils.exceptions import ConfigValidationError

logger = logging.getLogger(__name__)

CONFIG_KEYS = [f.name for f in fields(ExperimentConfig)]


def _as_list(value: Any) -> list:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def _coerce(key: str, value: Any) -> Any:
    try:
        if key == "scenario":
            return value if isinstance(value, Scenario) else Scenario(value)
        if key == "generator_optimizer":
            return value if isinstance(value, GeneratorOptimizer) else GeneratorOptimizer(value)
        if key == "methods":
            return [v if isinstance(v, Method) else Method(v) for v in _as_list(value)]
        if key == "seeds":
            return [int(v) for v in _as_list(value)]
        if key == "architectures":
            return [str(v) for v in _as_list(value)]
    except ValueError as e:
        raise ConfigValidationError(f"Valeur invalide pour {key} : {value!r} ({e})") from e
    return value


def config_from_dict(doc: Dict[str, Any]) -> ExperimentConfig:
    """
    Construit et valide une configuration à partir d'un dictionnaire plat.

    Raises:
        ConfigValidationError: clé inconnue, valeur invalide ou règle violée
    """
    unknown = sorted(set(doc) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigValidationError(f"Clés inconnues : {unknown} (clés valides : {CONFIG_KEYS})")
    cfg = ExperimentConfig(**{key: _coerce(key, value) for key, value in doc.items()})
    ConfigValidator.check(cfg)
    return cfg


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Charge un fichier YAML ; sans chemin, retourne la configuration par défaut.

    Raises:
        ConfigValidationError: fichier illisible ou configuration invalide
    """
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = yaml.safe_load(handle) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigValidationError(f"Lecture de la configuration impossible ({path}) : {e}") from e
    if not isinstance(doc, dict):
        raise ConfigValidationError(f"La configuration doit être un document clé-valeur : {path}")
    logger.info(f"Configuration chargée depuis {path}")
    return config_from_dict(doc)


def apply_overrides(cfg: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Remplace les champs donnés (les valeurs None sont ignorées) puis revalide."""
    changes = {key: _coerce(key, value) for key, value in overrides.items() if value is not None}
    unknown = sorted(set(changes) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigValidationError(f"Clés inconnues : {unknown}")
    updated = replace(cfg, **changes)
    ConfigValidator.check(updated)
    return updated
