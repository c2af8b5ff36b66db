"""Recursive minus/plus visual sound separation on synthetic mixtures."""

from .audio import Spectrogram, StftConfig, Waveform
from .engine import SeparationResult, count_sounds, separate, separate_independent_baseline
from .models import ModelConfig, MpModel
from .specalg import Mask, add, apply_mask, binarize, energy, subtract
from .synthdata import GenConfig, MixSample, SoloClip, SoundClass
from .training import TrainConfig, train

__all__ = [
    "Spectrogram", "StftConfig", "Waveform", "Mask",
    "add", "subtract", "apply_mask", "energy", "binarize",
    "SoundClass", "SoloClip", "MixSample", "GenConfig",
    "ModelConfig", "MpModel",
    "SeparationResult", "separate", "separate_independent_baseline",
    "count_sounds",
    "TrainConfig", "train",
]
