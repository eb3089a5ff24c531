"""
Couche minimale de modèles différentiables : classifieurs, générateur conditionnel,
accès aux paramètres, gradients et statistiques de batch-normalisation.

Tous les modèles sont en float64 sur CPU. La batch-normalisation est appliquée en
mode fonctionnel avec un drapeau d'entraînement explicite : un passage en mode
évaluation ne modifie jamais l'état d'un module, ce qui permet de partager un
modèle client en lecture entre plusieurs fils d'exécution.
"""
import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from config.constants import BN_EPS, BN_MOMENTUM, GeneratorOptimizer, Mode
from config.settings import Settings
from utils.exceptions import (
    BatchTooSmallError, ExportError, InvalidArgumentError, NoBatchNormError,
    NonFiniteLossError, ShapeMismatchError, UnknownArchitectureError
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
ArrayLike = Union[np.ndarray, torch.Tensor, Sequence]


def to_tensor(values: ArrayLike, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Convertit un tableau en tenseur (sans copie si possible)."""
    if isinstance(values, torch.Tensor):
        return values if values.dtype == dtype else values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def _batch_norm(bn: nn.BatchNorm1d, h: torch.Tensor, train: bool) -> torch.Tensor:
    return F.batch_norm(
        h, bn.running_mean, bn.running_var, bn.weight, bn.bias,
        training=train, momentum=bn.momentum, eps=bn.eps,
    )


def _make_bn(width: int) -> nn.BatchNorm1d:
    return nn.BatchNorm1d(width, eps=BN_EPS, momentum=BN_MOMENTUM)


class MLPClassifier(nn.Module):
    """Perceptron multicouche : [Linear → BN → ReLU] × n puis tête linéaire."""

    def __init__(self, input_dim: int, hidden: Sequence[int], n_classes: int):
        super().__init__()
        widths = [input_dim, *hidden]
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.norms = nn.ModuleList(_make_bn(w) for w in hidden)
        self.head = nn.Linear(widths[-1], n_classes)

    def forward(self, x: torch.Tensor, train: bool = False,
                capture: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        for linear, bn in zip(self.linears, self.norms):
            h = linear(x)
            if capture is not None:
                capture.append(h)
            x = F.relu(_batch_norm(bn, h, train))
        return self.head(x)


class ConvClassifier(nn.Module):
    """Petit réseau convolutif 1D sur le vecteur de caractéristiques."""

    def __init__(self, input_dim: int, channels: int, n_classes: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(1, channels, kernel_size, padding=kernel_size // 2)
        self.norm = _make_bn(channels)
        self.head = nn.Linear(channels * input_dim, n_classes)

    def forward(self, x: torch.Tensor, train: bool = False,
                capture: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        h = self.conv(x.unsqueeze(1))
        if capture is not None:
            capture.append(h)
        x = F.relu(_batch_norm(self.norm, h, train))
        return self.head(x.flatten(1))


class FeatureGenerator(nn.Module):
    """Générateur : couche dense, BN, LeakyReLU puis projection vers l'espace des données."""

    def __init__(self, input_dim: int, hidden: int, output_dim: int):
        super().__init__()
        self.fc = nn.Linear(input_dim, hidden)
        self.norm = _make_bn(hidden)
        self.out = nn.Linear(hidden, output_dim)

    def forward(self, x: torch.Tensor, train: bool = False,
                capture: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        h = self.fc(x)
        if capture is not None:
            capture.append(h)
        return self.out(F.leaky_relu(_batch_norm(self.norm, h, train), 0.2))


# Registre des architectures de classifieurs (entrée, classes) -> module
CLASSIFIER_REGISTRY: Dict[str, Callable[[int, int], nn.Module]] = {
    "mlp_small": lambda d, c: MLPClassifier(d, [32], c),
    "mlp_wide": lambda d, c: MLPClassifier(d, [64, 64], c),
    "cnn_small": lambda d, c: ConvClassifier(d, 4, c),
}

GENERATOR_TAG = "generator"
GENERATOR_HIDDEN = 64


@dataclass
class LayerSpec:
    """Entrée du manifeste : nom et forme d'un tenseur de paramètres."""

    name: str
    shape: Tuple[int, ...]


@dataclass
class BNStatSet:
    """Paires (moyenne, variance) par couche BN, dans l'ordre des couches."""

    layers: List[Tuple[torch.Tensor, torch.Tensor]]

    def __len__(self) -> int:
        return len(self.layers)

    def widths(self) -> List[int]:
        return [int(mean.shape[0]) for mean, _ in self.layers]

    def to_numpy(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(m.detach().cpu().numpy().copy(), v.detach().cpu().numpy().copy()) for m, v in self.layers]


class DiffModel:
    """
    Modèle différentiable (classifieur ou générateur).

    Expose un vecteur plat de paramètres avec son manifeste, le passage avant en mode
    entraînement ou évaluation et les couches de batch-normalisation.
    """

    def __init__(self, module: nn.Module, architecture_tag: str, input_dim: int, n_outputs: int,
                 seed: Optional[int] = None, kind: str = "classifier",
                 metadata: Optional[Dict[str, Any]] = None):
        self.module = module.to(DTYPE)
        self.architecture_tag = architecture_tag
        self.input_dim = input_dim
        self.n_outputs = n_outputs
        self.seed = seed
        self.kind = kind
        self.metadata = dict(metadata or {})

    def __repr__(self) -> str:
        return (f"DiffModel({self.architecture_tag!r}, in={self.input_dim}, "
                f"out={self.n_outputs}, params={self.n_parameters})")

    @property
    def parameters(self) -> np.ndarray:
        """Copie du vecteur plat des paramètres."""
        return parameters_to_vector(self.module.parameters()).detach().cpu().numpy().copy()

    def parameter_list(self) -> List[nn.Parameter]:
        return list(self.module.parameters())

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def set_parameters(self, vector: ArrayLike) -> None:
        """Remplace les paramètres par un vecteur plat de même longueur."""
        flat = to_tensor(vector).reshape(-1)
        if flat.numel() != self.n_parameters:
            raise ShapeMismatchError(
                f"Vecteur de {flat.numel()} paramètres pour un manifeste de {self.n_parameters}"
            )
        with torch.no_grad():
            vector_to_parameters(flat.clone(), self.module.parameters())

    def manifest(self) -> List[LayerSpec]:
        return [LayerSpec(name, tuple(p.shape)) for name, p in self.module.named_parameters()]

    @property
    def bn_layers(self) -> List[nn.BatchNorm1d]:
        return [m for m in self.module.modules() if isinstance(m, nn.BatchNorm1d)]

    def buffers_vector(self) -> np.ndarray:
        """Statistiques courantes de toutes les couches BN, concaténées."""
        parts = [t for bn in self.bn_layers for t in (bn.running_mean, bn.running_var)]
        if not parts:
            return np.zeros(0)
        return torch.cat([t.reshape(-1) for t in parts]).detach().cpu().numpy().copy()

    def set_buffers(self, vector: ArrayLike) -> None:
        flat = to_tensor(vector).reshape(-1)
        offset = 0
        with torch.no_grad():
            for bn in self.bn_layers:
                for buffer in (bn.running_mean, bn.running_var):
                    n = buffer.numel()
                    buffer.copy_(flat[offset:offset + n].view_as(buffer))
                    offset += n
        if offset != flat.numel():
            raise ShapeMismatchError(f"Vecteur de statistiques BN de taille {flat.numel()}, attendu {offset}")

    def clone(self) -> "DiffModel":
        return copy.deepcopy(self)

    def forward(self, x: torch.Tensor, mode: Mode = Mode.EVAL,
                capture: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        train = mode == Mode.TRAIN
        if train and x.shape[0] < 2 and self.bn_layers:
            raise BatchTooSmallError("Le mode entraînement exige un lot d'au moins 2 échantillons")
        return self.module(x, train=train, capture=capture)


def _init_parameters(module: nn.Module, seed: int) -> None:
    """Initialisation uniforme ±1/√fan_in, déterministe et indépendante de l'état global de torch."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, (nn.Linear, nn.Conv1d)):
                bound = 1.0 / np.sqrt(layer.weight[0].numel())
                layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
                if layer.bias is not None:
                    layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))


def build_classifier(architecture_tag: str, feature_dim: int, c: int, seed: int) -> DiffModel:
    """
    Construit un classifieur initialisé depuis le registre.

    Args:
        architecture_tag: clé du registre (mlp_small, mlp_wide, cnn_small)
        feature_dim: dimension d'entrée
        c: nombre de classes
        seed: graine d'initialisation

    Raises:
        UnknownArchitectureError: architecture absente du registre
    """
    if architecture_tag not in CLASSIFIER_REGISTRY:
        raise UnknownArchitectureError(
            f"Architecture inconnue : {architecture_tag} (disponibles : {sorted(CLASSIFIER_REGISTRY)})"
        )
    if feature_dim < 1 or c < 1:
        raise InvalidArgumentError(f"Dimensions invalides : feature_dim={feature_dim}, c={c}")
    module = CLASSIFIER_REGISTRY[architecture_tag](feature_dim, c).to(DTYPE)
    _init_parameters(module, seed)
    return DiffModel(module, architecture_tag, feature_dim, c, seed=seed)


def build_generator(noise_dim: int, c: int, output_dim: int, seed: int,
                    conditional: bool = True, hidden: int = GENERATOR_HIDDEN) -> DiffModel:
    """
    Construit un générateur (bruit ⊕ one-hot de l'étiquette) → vecteur synthétique.

    Raises:
        InvalidArgumentError: dimensions non positives
    """
    if noise_dim < 1 or c < 1 or output_dim < 1:
        raise InvalidArgumentError(
            f"Dimensions invalides : noise_dim={noise_dim}, c={c}, output_dim={output_dim}"
        )
    input_dim = noise_dim + c if conditional else noise_dim
    module = FeatureGenerator(input_dim, hidden, output_dim).to(DTYPE)
    _init_parameters(module, seed)
    metadata = {"noise_dim": noise_dim, "n_classes": c, "conditional": conditional, "hidden": hidden}
    return DiffModel(module, GENERATOR_TAG, input_dim, output_dim, seed=seed,
                     kind="generator", metadata=metadata)


def sample_noise(batch_size: int, noise_dim: int, seed: int) -> torch.Tensor:
    """Lot de bruits gaussiens tiré d'un générateur aléatoire dédié."""
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(batch_size, noise_dim, generator=generator, dtype=DTYPE)


def generate(generator: DiffModel, z: torch.Tensor, y: torch.Tensor, mode: Mode = Mode.TRAIN) -> torch.Tensor:
    """Produit un lot synthétique à partir des bruits z et des étiquettes y."""
    if generator.metadata.get("conditional", True):
        one_hot = F.one_hot(y.long(), generator.metadata["n_classes"]).to(DTYPE)
        inputs = torch.cat([to_tensor(z), one_hot], dim=1)
    else:
        inputs = to_tensor(z)
    return forward_logits(generator, inputs, mode)


def forward_logits(model: DiffModel, batch: ArrayLike, mode: Mode = Mode.EVAL) -> torch.Tensor:
    """
    Passage avant ; retourne les sorties brutes (logits avant softmax).

    Raises:
        ShapeMismatchError: nombre de colonnes différent de la dimension d'entrée
    """
    x = to_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatchError(
            f"Lot de forme {tuple(x.shape)} pour un modèle d'entrée {model.input_dim}"
        )
    return model.forward(x, mode)


def _layer_stats(h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    dims = tuple(d for d in range(h.ndim) if d != 1)
    mean = h.mean(dim=dims)
    var = h.var(dim=dims, unbiased=False)
    return mean, var


def forward_with_bn_stats(model: DiffModel, batch: ArrayLike,
                          mode: Mode = Mode.EVAL) -> Tuple[torch.Tensor, BNStatSet]:
    """Logits et statistiques de lot (différentiables) aux entrées de chaque couche BN."""
    x = to_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatchError(f"Lot de forme {tuple(x.shape)} pour un modèle d'entrée {model.input_dim}")
    if not model.bn_layers:
        raise NoBatchNormError(f"Aucune couche BN dans {model.architecture_tag}")
    if x.shape[0] < 2:
        raise BatchTooSmallError("Statistiques de lot indéfinies pour moins de 2 échantillons")
    captured: List[torch.Tensor] = []
    logits = model.forward(x, mode, capture=captured)
    return logits, BNStatSet([_layer_stats(h) for h in captured])


def bn_batch_stats(model: DiffModel, batch: ArrayLike) -> BNStatSet:
    """
    Moyenne et variance biaisée (1/b) des activations cachées produites par ce lot,
    à l'entrée de chaque couche BN. Le passage se fait en mode évaluation.

    Raises:
        BatchTooSmallError: lot de moins de 2 échantillons
        NoBatchNormError: modèle sans couche BN
    """
    _, stats = forward_with_bn_stats(model, batch, Mode.EVAL)
    return stats


def bn_running_stats(model: DiffModel) -> BNStatSet:
    """
    Copie des statistiques courantes stockées dans chaque couche BN.

    Raises:
        NoBatchNormError: modèle sans couche BN
    """
    layers = model.bn_layers
    if not layers:
        raise NoBatchNormError(f"Aucune couche BN dans {model.architecture_tag}")
    return BNStatSet([(bn.running_mean.detach().clone(), bn.running_var.detach().clone()) for bn in layers])


# ---------------------------------------------------------------------------
# Pertes composables et gradients
# ---------------------------------------------------------------------------

@dataclass
class LossInputs:
    """Entrées d'une perte : lot, étiquettes et éventuels tenseurs auxiliaires."""

    batch: Optional[ArrayLike] = None
    labels: Optional[ArrayLike] = None
    extra: Dict[str, Any] = field(default_factory=dict)


LossTerm = Callable[[DiffModel, LossInputs], torch.Tensor]


@dataclass
class LossSpec:
    """Somme pondérée de termes de perte, chacun fonction du modèle et des entrées."""

    terms: List[Tuple[float, LossTerm]] = field(default_factory=list)

    def plus(self, term: LossTerm, weight: float = 1.0) -> "LossSpec":
        return LossSpec(self.terms + [(weight, term)])

    def __add__(self, other: "LossSpec") -> "LossSpec":
        return LossSpec(self.terms + other.terms)

    def __call__(self, model: DiffModel, inputs: LossInputs) -> torch.Tensor:
        total = torch.zeros((), dtype=DTYPE)
        for weight, term in self.terms:
            total = total + weight * term(model, inputs)
        return total


def cross_entropy_loss(mode: Mode = Mode.TRAIN) -> LossSpec:
    """Entropie croisée moyenne des logits du modèle contre les étiquettes."""
    def term(model: DiffModel, inputs: LossInputs) -> torch.Tensor:
        logits = forward_logits(model, inputs.batch, mode)
        return F.cross_entropy(logits, to_tensor(inputs.labels, torch.long))
    return LossSpec([(1.0, term)])


def quadratic_parameter_loss() -> LossSpec:
    """Sonde analytique ‖θ‖²/2, de gradient θ."""
    def term(model: DiffModel, inputs: LossInputs) -> torch.Tensor:
        return 0.5 * sum((p * p).sum() for p in model.module.parameters())
    return LossSpec([(1.0, term)])


def constant_loss(value: float) -> LossSpec:
    """Perte constante, détachée des paramètres."""
    return LossSpec([(1.0, lambda model, inputs: torch.tensor(float(value), dtype=DTYPE))])


def custom_loss(fn: LossTerm) -> LossSpec:
    return LossSpec([(1.0, fn)])


def loss_and_grad(model: DiffModel, loss_spec: LossSpec,
                  inputs: Optional[LossInputs] = None) -> Tuple[float, np.ndarray]:
    """
    Évalue une perte et son gradient par rapport au vecteur des paramètres.

    Les statistiques BN courantes sont restaurées après l'appel.

    Returns:
        (perte scalaire, gradient de même longueur que le vecteur des paramètres)

    Raises:
        NonFiniteLossError: perte NaN ou infinie
    """
    inputs = inputs or LossInputs()
    saved = model.buffers_vector()
    params = model.parameter_list()
    try:
        loss = loss_spec(model, inputs)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"Perte non finie pour {model.architecture_tag}",
                {"architecture": model.architecture_tag, "loss": float(loss.detach())},
            )
        if loss.requires_grad:
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            flat = torch.cat([
                (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
            ])
        else:
            flat = torch.zeros(model.n_parameters, dtype=DTYPE)
    finally:
        if saved.size:
            model.set_buffers(saved)
    return float(loss.detach()), flat.detach().cpu().numpy()


def apply_gradients(optimizer: torch.optim.Optimizer, params: Sequence[torch.Tensor],
                    loss: torch.Tensor) -> None:
    """Un pas d'optimisation sur `params` seuls ; les autres modèles du graphe ne reçoivent aucun gradient."""
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    optimizer.step()


# ---------------------------------------------------------------------------
# Points de sauvegarde
# ---------------------------------------------------------------------------

def save_checkpoint(model: DiffModel, directory: Union[str, Path]) -> Path:
    """
    Écrit un manifeste JSON et un tableau plat float64 petit-boutiste
    (paramètres puis statistiques BN) dans `directory`.

    Raises:
        ExportError: erreur d'écriture
    """
    path = Path(directory)
    layers = [{"name": spec.name, "shape": list(spec.shape), "role": "parameter"} for spec in model.manifest()]
    for index, bn in enumerate(model.bn_layers):
        for stat in ("running_mean", "running_var"):
            layers.append({"name": f"bn{index}.{stat}", "shape": [bn.num_features], "role": "buffer"})
    manifest = {
        "architecture_tag": model.architecture_tag,
        "kind": model.kind,
        "input_dim": model.input_dim,
        "n_outputs": model.n_outputs,
        "seed": model.seed,
        "metadata": model.metadata,
        "dtype": "<f8",
        "layers": layers,
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / Settings.MANIFEST_FILE).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        flat = np.concatenate([model.parameters, model.buffers_vector()]).astype("<f8")
        flat.tofile(path / Settings.PARAMETERS_FILE)
    except OSError as e:
        logger.error(f"Écriture du point de sauvegarde impossible : {e}")
        raise ExportError(f"Écriture impossible dans {path} : {e}")
    return path


def load_checkpoint(directory: Union[str, Path]) -> DiffModel:
    """
    Recharge un modèle écrit par `save_checkpoint`.

    Raises:
        UnknownArchitectureError: architecture hors registre
        ShapeMismatchError: fichier de paramètres incohérent avec le manifeste
    """
    path = Path(directory)
    manifest = json.loads((path / Settings.MANIFEST_FILE).read_text(encoding="utf-8"))
    seed = manifest.get("seed") or 0
    if manifest["kind"] == "generator":
        meta = manifest["metadata"]
        model = build_generator(meta["noise_dim"], meta["n_classes"], manifest["n_outputs"], seed,
                                conditional=meta["conditional"], hidden=meta["hidden"])
    else:
        model = build_classifier(manifest["architecture_tag"], manifest["input_dim"], manifest["n_outputs"], seed)
    model.seed = manifest.get("seed")
    flat = np.fromfile(path / Settings.PARAMETERS_FILE, dtype="<f8")
    n = model.n_parameters
    model.set_parameters(flat[:n])
    model.set_buffers(flat[n:])
    return model


def make_optimizer(kind: GeneratorOptimizer, params: Sequence[torch.Tensor], lr: float) -> torch.optim.Optimizer:
    """Adam (réglage serveur par défaut) ou SGD simple."""
    if kind == GeneratorOptimizer.ADAM:
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)
