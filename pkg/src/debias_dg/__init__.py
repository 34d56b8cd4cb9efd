"""Multi-source domain generalization with bias-regularized heads and multi-layer cross-gradient training."""

from .autodiff import Tape, Tensor
from .datagen import ConfoundSpec, RotatedSpec, gen_biased_domains, gen_rotated, lodo_split
from .harness import ExperimentConfig, run_grid
from .losses import LossWeights
from .metrics import BiasReport, auc, c2st, cross_dataset_report
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "ConfoundSpec", "RotatedSpec", "gen_biased_domains", "gen_rotated",
           "lodo_split", "ExperimentConfig", "run_grid", "LossWeights", "BiasReport", "auc", "c2st",
           "cross_dataset_report", "TrainConfig", "train"]
