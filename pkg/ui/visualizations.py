"""
Figures des expériences : courbes de précision et carte de chaleur des capacités.
"""
import logging
from pathlib import Path
from typing import List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import seaborn as sns  # noqa: E402

from config.constants import Scenario  # noqa: E402
from data.schemas import CapabilityMatrices, ExperimentResult  # noqa: E402
from utils.exceptions import ExportError, InvalidArgumentError  # noqa: E402

logger = logging.getLogger(__name__)


class VisualizationComponents:
    """Classe contenant les composants de visualisation."""

    @staticmethod
    def accuracy_figure(result: ExperimentResult):
        """
        Courbes de précision de test par époque de distillation, une par (méthode, graine).

        Args:
            result: résultat d'expérience contenant au moins une trace

        Returns:
            Figure matplotlib
        """
        traces = result.accuracy_traces()
        if not traces:
            raise InvalidArgumentError("Aucune trace de précision à tracer")
        cfg = result.config

        fig, ax = plt.subplots(figsize=(7, 4.5))
        palette = sns.color_palette("deep", len(traces))
        for color, ((method, seed), values) in zip(palette, sorted(traces.items())):
            ax.plot(range(len(values)), values, label=f"{method} (graine {seed})", color=color)
        title = cfg.scenario.value + (f", α={cfg.alpha}" if cfg.scenario == Scenario.DIRICHLET else "")
        ax.set_title(f"Précision de test par époque de distillation ({title})")
        ax.set_xlabel("Époque globale")
        ax.set_ylabel("Précision top-1")
        ax.set_ylim(0.0, 1.0)
        ax.legend(loc="lower right", fontsize="small")
        fig.tight_layout()
        return fig

    @staticmethod
    def capability_heatmap(caps: CapabilityMatrices):
        """Carte de chaleur de Ū_r (classes en lignes, clients en colonnes)."""
        frame = caps.to_frames()["Ur"]
        frame.index = [f"classe {j}" for j in range(caps.n_classes)]
        fig, ax = plt.subplots(figsize=(1.2 * caps.n_clients + 2, 0.5 * caps.n_classes + 1.5))
        sns.heatmap(frame, annot=True, fmt=".2f", cmap="viridis", vmin=0.0, vmax=1.0, ax=ax)
        ax.set_title("Capacités de guidage normalisées par classe")
        fig.tight_layout()
        return fig


def _save(fig, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120)
    except OSError as e:
        raise ExportError(f"Écriture impossible : {path} ({e})") from e
    finally:
        plt.close(fig)
    return path


def plot_curves(result: ExperimentResult, output_dir: Union[str, Path]) -> List[Path]:
    """
    Écrit accuracy_<scénario>_<alpha>_<empreinte>.png si une distillation a tourné
    et heatmap_Ur_<empreinte>.png si la stratification a tourné (première graine,
    dernier tour).

    Returns:
        Chemins des figures écrites
    """
    output_dir = Path(output_dir)
    cfg = result.config
    digest = cfg.config_hash()
    alpha = cfg.alpha if cfg.scenario == Scenario.DIRICHLET else "na"

    paths: List[Path] = []
    if result.accuracy_traces():
        paths.append(_save(VisualizationComponents.accuracy_figure(result),
                           output_dir / f"accuracy_{cfg.scenario.value}_{alpha}_{digest}.png"))
    else:
        # FedAvg seul : aucune époque de distillation
        logger.info("Pas de trace de distillation : courbes de précision ignorées")

    if result.capabilities:
        seed, round_index = sorted(result.capabilities, key=lambda key: (cfg.seeds.index(key[0]), -key[1]))[0]
        paths.append(_save(VisualizationComponents.capability_heatmap(result.capabilities[(seed, round_index)]),
                           output_dir / f"heatmap_Ur_{digest}.png"))
    else:
        logger.info("Pas de matrices de capacité : carte de chaleur ignorée")
    return paths
