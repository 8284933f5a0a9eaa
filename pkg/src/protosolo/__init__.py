"""ProtoSolo-style interpretable classification from single prototype activations."""

__version__ = "0.1.0"

from .data import DatasetSpec, Sample, augment, generate, load_folder
from .estimator import ProtoSoloClassifier
from .losses import LossWeights
from .model import ModelConfig, ProtoSoloNet, classify, prototype_scores, similarity
from .training import TrainConfig, load_model, save_checkpoint, train

__all__ = [
    "DatasetSpec",
    "Sample",
    "augment",
    "generate",
    "load_folder",
    "ProtoSoloClassifier",
    "LossWeights",
    "ModelConfig",
    "ProtoSoloNet",
    "classify",
    "prototype_scores",
    "similarity",
    "TrainConfig",
    "load_model",
    "save_checkpoint",
    "train",
]
