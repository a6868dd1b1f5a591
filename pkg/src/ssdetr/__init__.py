"""Semi-supervised deformable-transformer table detection on a numpy autodiff core."""

from .autodiff import Tape, Tensor
from .data import SynthDocSpec
from .engine import TrainConfig
from .model import Detector, ModelConfig

__all__ = ["Tape", "Tensor", "SynthDocSpec", "TrainConfig", "Detector", "ModelConfig"]
