"""Squeeze-and-excitation CNN for real/fake image classification, in numpy."""
from .data import DatasetContainer, SyntheticSpec, generate_synthetic, ingest_directory, read_container, write_container
from .metrics import auc, classification_report, confusion, roc_points
from .model import (
    DESK_CONFIG,
    REFERENCE_CONFIG,
    ModelConfig,
    SequentialModel,
    build_baseline_model,
    build_reference_model,
    build_scaled_model,
    load_weights,
    save_weights,
)
from .training import Adam, TrainConfig, cce_loss, fit, kfold_partition, train_test_split

__version__ = "0.1.0"

__all__ = [
    "DatasetContainer", "SyntheticSpec", "generate_synthetic", "ingest_directory",
    "read_container", "write_container",
    "auc", "classification_report", "confusion", "roc_points",
    "DESK_CONFIG", "REFERENCE_CONFIG", "ModelConfig", "SequentialModel",
    "build_baseline_model", "build_reference_model", "build_scaled_model",
    "load_weights", "save_weights",
    "Adam", "TrainConfig", "cce_loss", "fit", "kfold_partition", "train_test_split",
]
