"""On-demand solid texture synthesis from 2D exemplars.

A compact multi-scale 3D convolutional generator is trained against slice
statistics of one or more exemplar images and can then synthesize any box
of an unbounded, seamlessly tileable texture volume directly from its
integer coordinates.
"""

from .autodiff import Tape, TapeConsumedError, Var, backward, grad_value
from .container import ContainerError, load_tensors, save_tensors
from .descriptor import (DescriptorNet, ExemplarSet, histogram_match,
                         ingest_vgg_weights, write_random_descriptor_weights)
from .generator import GeneratorModel, SolidTexture
from .noise import NoiseSpec, Region, margin_table, noise_extents
from .trainer import NumericError, Trainer, TrainingConfig, train

__all__ = [
    "Tape", "TapeConsumedError", "Var", "backward", "grad_value",
    "ContainerError", "load_tensors", "save_tensors",
    "DescriptorNet", "ExemplarSet", "histogram_match",
    "ingest_vgg_weights", "write_random_descriptor_weights",
    "GeneratorModel", "SolidTexture",
    "NoiseSpec", "Region", "margin_table", "noise_extents",
    "NumericError", "Trainer", "TrainingConfig", "train",
]

__version__ = "0.1.0"
