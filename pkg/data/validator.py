"""
Validation des configurations d'expérience.
"""
from typing import Any, List

from config.constants import (
    CLASSIFIER_ARCHITECTURES, VALIDATION_RANGES, GeneratorOptimizer, Method, Scenario
)
from data.schemas import ExperimentConfig
from utils.exceptions import ConfigValidationError

INTEGER_FIELDS = {
    "clients", "n_classes", "n_per_class", "feature_dim", "local_epochs", "local_batch_size",
    "global_epochs", "generator_epochs", "rounds", "noise_dim", "synth_batch_size",
    "distill_steps", "max_retries",
}


class ConfigValidator:
    """Classe pour valider les configurations d'expérience."""

    @staticmethod
    def validate_numeric_field(value: Any, field_name: str) -> None:
        """Valide un champ numérique."""
        if field_name not in VALIDATION_RANGES:
            raise ConfigValidationError(f"Champ inconnu : {field_name}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{field_name} doit être numérique, reçu : {value!r}")
        if field_name in INTEGER_FIELDS and int(value) != value:
            raise ConfigValidationError(f"{field_name} doit être entier, reçu : {value}")

        ranges = VALIDATION_RANGES[field_name]
        if not (ranges["min"] <= value <= ranges["max"]):
            raise ConfigValidationError(
                f"{field_name} doit être entre {ranges['min']} et {ranges['max']}, "
                f"reçu : {value}"
            )

    @staticmethod
    def validate_enum_field(value: Any, enum_class, field_name: str) -> None:
        """Valide un champ d'énumération."""
        valid_values = [e.value for e in enum_class]
        if not isinstance(value, enum_class) and value not in valid_values:
            raise ConfigValidationError(
                f"{field_name} doit être l'une des valeurs : {valid_values}, "
                f"reçu : {value}"
            )

    @classmethod
    def validate_config(cls, cfg: ExperimentConfig) -> List[str]:
        """
        Valide tous les champs d'une configuration.

        Returns:
            Liste des erreurs de validation (vide si tout est valide)
        """
        errors = []

        for field_name in VALIDATION_RANGES:
            try:
                cls.validate_numeric_field(getattr(cfg, field_name), field_name)
            except ConfigValidationError as e:
                errors.append(str(e))

        enum_validations = [(cfg.scenario, Scenario, "scenario"), (cfg.generator_optimizer, GeneratorOptimizer,
                                                                   "generator_optimizer")]
        enum_validations += [(method, Method, "methods") for method in cfg.methods]
        for value, enum_class, field_name in enum_validations:
            try:
                cls.validate_enum_field(value, enum_class, field_name)
            except ConfigValidationError as e:
                errors.append(str(e))

        tags = list(cfg.architectures) + ([cfg.global_architecture] if cfg.global_architecture else [])
        for tag in tags:
            if tag not in CLASSIFIER_ARCHITECTURES:
                errors.append(f"Architecture inconnue : {tag} (valeurs : {CLASSIFIER_ARCHITECTURES})")

        if not cfg.methods:
            errors.append("Au moins une méthode est requise")
        if not cfg.seeds:
            errors.append("Au moins une graine est requise")
        if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in cfg.seeds):
            errors.append(f"Les graines doivent être des entiers positifs, reçu : {cfg.seeds}")
        if not isinstance(cfg.conditional_generator, bool):
            errors.append("conditional_generator doit être un booléen")

        return errors

    @staticmethod
    def validate_business_rules(cfg: ExperimentConfig) -> List[str]:
        """
        Valide les règles de cohérence entre champs.

        Returns:
            Liste des erreurs de règles métier
        """
        errors = []

        # Règle : le scénario 2c/c exige exactement deux classes par client
        if cfg.scenario == Scenario.TWO_CLASS and 2 * cfg.clients != cfg.n_classes:
            errors.append(f"Scénario two_class : 2·clients ({2 * cfg.clients}) ≠ n_classes ({cfg.n_classes})")

        # Règle : une architecture unique ou une par client
        if len(cfg.architectures) not in (1, cfg.clients):
            errors.append(f"{len(cfg.architectures)} architectures pour {cfg.clients} clients")

        # Règle : chaque client doit pouvoir recevoir au moins un échantillon
        if cfg.n_classes * cfg.n_per_class < cfg.clients:
            errors.append("Moins d'échantillons que de clients")

        # Règle : la stratification mesure une trace d'au moins deux pertes
        if Method.FEDHYDRA in cfg.methods and cfg.generator_epochs < 2:
            errors.append("generator_epochs doit être ≥ 2 pour la stratification")

        return errors

    @classmethod
    def check(cls, cfg: ExperimentConfig) -> None:
        """
        Lève une erreur regroupant toutes les violations.

        Raises:
            ConfigValidationError: configuration invalide
        """
        errors = cls.validate_config(cfg)
        if not errors:
            errors = cls.validate_business_rules(cfg)
        if errors:
            raise ConfigValidationError("Configuration invalide : " + " ; ".join(errors))
