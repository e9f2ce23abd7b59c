"""AllMatch-style semi-supervised learning at desk scale."""

from .config import TrainConfig
from .estimator import AllMatchClassifier
from .harness import Trainer, run_experiment

__all__ = ["AllMatchClassifier", "TrainConfig", "Trainer", "run_experiment"]
