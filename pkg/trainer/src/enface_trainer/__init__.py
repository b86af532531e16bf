"""Trainer for the enface encrypted-inference runtime.

Trains a small patch-mixture face embedding network on a synthetic,
fully seeded dataset and exports it as a CFW1 model container that the
``enface`` runtime compiles and evaluates under encryption."""

from .data import FaceDataset, make_dataset, split_holdout
from .export import calibrate, collect_tensors, export_container
from .model import FaceNet, Hermite2, MarginHead, forward_reference
from .train import (TrainConfig, TrainingDivergedError, TrainResult, train,
                    train_and_export)

__all__ = [
    "FaceDataset", "make_dataset", "split_holdout",
    "calibrate", "collect_tensors", "export_container",
    "FaceNet", "Hermite2", "MarginHead", "forward_reference",
    "TrainConfig", "TrainingDivergedError", "TrainResult", "train",
    "train_and_export",
]
