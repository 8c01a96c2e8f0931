"""Probabilistic U-Net with variational dropout and grader-calibrated aleatoric uncertainty."""

from .datagen import Dataset, generate_dataset, load_dataset, save_dataset
from .harness import PROFILES, TrainConfig, evaluate, train
from .metrics import MetricsReport, ged_squared, ncc
from .model import ModelConfig, ProbabilisticUNet, load_checkpoint, save_checkpoint
from .objectives import total_loss
from .uncertainty import decompose, draw_samples

__version__ = "0.1.0"
