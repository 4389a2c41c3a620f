"""Multi-view 2D U-Net brain extraction.

Three U-Nets, one per cardinal view, predict per-slice brain probabilities
that are fused voxelwise into a 3D mask.
"""
from .inference import FusionWeights, ModelBundle, ProbabilityVolume, skullstrip
from .model import NetworkConfig, build, parameter_count
from .training import TrainingHyperparams, soft_dice_loss, train_all, train_network
from .volume import LabelVolume, Orientation, Volume, conform, load_volume, reorient, save_volume

__version__ = "0.1.0"

__all__ = [
    "FusionWeights", "LabelVolume", "ModelBundle", "NetworkConfig", "Orientation", "ProbabilityVolume",
    "TrainingHyperparams", "Volume", "build", "conform", "load_volume", "parameter_count", "reorient",
    "save_volume", "skullstrip", "soft_dice_loss", "train_all", "train_network",
]
