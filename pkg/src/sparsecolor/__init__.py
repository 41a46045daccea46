"""Exemplar-based colorization with a coarse global stage and a sparse-attention fine stage."""

from .color_space import LabImage, build_gamut, lab_to_rgb, rgb_to_lab
from .config import ModelConfig
from .estimator import ExemplarColorizer
from .model import ColorizationNet, coarse_colorize, colorize
from .trainer import TrainConfig, load_checkpoint, train

__all__ = [
    "ColorizationNet",
    "ExemplarColorizer",
    "LabImage",
    "ModelConfig",
    "TrainConfig",
    "build_gamut",
    "coarse_colorize",
    "colorize",
    "lab_to_rgb",
    "load_checkpoint",
    "rgb_to_lab",
    "train",
]

__version__ = "0.1.0"
