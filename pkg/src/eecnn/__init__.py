"""Early-exit CNN for real-time ball patch classification.

Subpackages by stage: :mod:`nn` (layers), :mod:`graph` (model assembly),
:mod:`weights` (EEW1 files), :mod:`data` / :mod:`synth` (PTCH datasets),
:mod:`losses` / :mod:`augment` / :mod:`train`, :mod:`cascade`,
:mod:`metrics` and :mod:`bench`.
"""

from __future__ import annotations

from .cascade import CascadeConfig, calibrate_exit_threshold, classify_patch_cascade, expected_cost, process_frame
from .data import Label, PatchRecord, PatchSet, read_dataset, split_dataset, write_dataset
from .errors import FormatError, ParameterError, UsageError
from .graph import (
    ModelGraph,
    SplitModel,
    attach_early_exit,
    build_ball_cnn,
    freeze_trunk,
    split_at_exit,
    total_macs,
    total_params,
)
from .losses import LossWeights, composite_loss
from .metrics import ConfusionMatrix, evaluate
from .synth import generate_synthetic
from .train import TrainConfig, train_early_exit, train_main
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "ConfusionMatrix",
    "FormatError",
    "Label",
    "LossWeights",
    "ModelGraph",
    "ParameterError",
    "PatchRecord",
    "PatchSet",
    "SplitModel",
    "TrainConfig",
    "UsageError",
    "attach_early_exit",
    "build_ball_cnn",
    "calibrate_exit_threshold",
    "classify_patch_cascade",
    "composite_loss",
    "evaluate",
    "expected_cost",
    "freeze_trunk",
    "generate_synthetic",
    "load_weights",
    "process_frame",
    "read_dataset",
    "save_weights",
    "split_at_exit",
    "split_dataset",
    "total_macs",
    "total_params",
    "train_early_exit",
    "train_main",
    "write_dataset",
]
