"""Diversity-controlled semantic-layout-to-image synthesis at desk scale."""

__version__ = "0.1.0"

from .autodiff import Tensor, Parameter, Tape, backward, gradient_check  # noqa: F401
from .data import (SemanticLayout, ImageRGB, NoiseVector, Dataset,  # noqa: F401
                   SyntheticWorldConfig, synth_generate)
from .losses import LossConfig  # noqa: F401
from .training import TrainConfig, train  # noqa: F401
from .evaluation import MetricsReport, reality_report  # noqa: F401
