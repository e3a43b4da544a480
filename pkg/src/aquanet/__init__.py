"""Two-path waterbody segmentation: model, training, metrics, dataset
analytics, texture-patch tooling and synthetic fixtures."""

from .errors import AquanetError
from .metrics import ConfusionMatrix, MetricsReport, segmentation_report
from .modulation import ModulationNet, grad_check, modulate
from .network import AquaNet, AquaNetConfig, build_model
from .taxonomy import ClassTaxonomy, load_atlantis, load_taxonomy
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AquanetError",
    "AquaNet",
    "AquaNetConfig",
    "ClassTaxonomy",
    "ConfusionMatrix",
    "MetricsReport",
    "ModulationNet",
    "TrainConfig",
    "__version__",
    "build_model",
    "evaluate",
    "grad_check",
    "load_atlantis",
    "load_taxonomy",
    "modulate",
    "segmentation_report",
    "train",
]
