"""Experiment orchestration: configs, training protocols, diagnostics and reports."""
from .config import ExperimentConfig
from .train import RunReport, TrainedRun, Trainer, run_experiment, train_experiment

__all__ = ["ExperimentConfig", "RunReport", "TrainedRun", "Trainer", "run_experiment", "train_experiment"]
