"""Data calibration for test-time domain adaptation of a frozen classifier."""

__version__ = "0.1.0"

from .data import DomainDataset, ShiftConfig, generate_domain_pair, load_dataset, save_dataset
from .evaluate import TradeoffReport, accuracy, seg_metrics, tradeoff_report
from .nets import (
    CalibratorConfig,
    NetworkSpec,
    ParameterSet,
    build_calibrator,
    build_classifier,
    calibrate,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .train import TrainConfig, lsweep, train_calibrator, train_source

__all__ = [
    "CalibratorConfig",
    "DomainDataset",
    "NetworkSpec",
    "ParameterSet",
    "ShiftConfig",
    "TradeoffReport",
    "TrainConfig",
    "accuracy",
    "build_calibrator",
    "build_classifier",
    "calibrate",
    "count_parameters",
    "generate_domain_pair",
    "load_checkpoint",
    "load_dataset",
    "lsweep",
    "save_checkpoint",
    "save_dataset",
    "seg_metrics",
    "tradeoff_report",
    "train_calibrator",
    "train_source",
]
