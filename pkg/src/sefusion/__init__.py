"""Squeeze-and-excitation fusion of text and image features for meme emotion classification."""

from .data import TASKS, Dataset, LabelPrior, Record, TaskSpec, compute_priors, get_task, load_dataset, save_dataset, synth_dataset
from .fusion import FusionParams, FusionTrace, init_fusion_params, sefusion_forward, sefusion_forward_multi
from .metrics import EvalReport, accuracy, average_weighted_f1, weighted_f1
from .model import FusionConfig, HeadConfig, TrainConfig, TrainedModel, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "TASKS",
    "Dataset",
    "EvalReport",
    "FusionConfig",
    "FusionParams",
    "FusionTrace",
    "HeadConfig",
    "LabelPrior",
    "Record",
    "TaskSpec",
    "TrainConfig",
    "TrainedModel",
    "accuracy",
    "average_weighted_f1",
    "compute_priors",
    "get_task",
    "init_fusion_params",
    "load_checkpoint",
    "load_dataset",
    "predict",
    "save_checkpoint",
    "save_dataset",
    "sefusion_forward",
    "sefusion_forward_multi",
    "synth_dataset",
    "train",
    "weighted_f1",
]
