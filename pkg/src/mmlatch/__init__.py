"""Multimodal sentiment regression with top-down cross-modal feedback masks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSplits, MultimodalSample, generate_gated_dataset, load_dataset, save_dataset
from .metrics import MetricsReport, compute_metrics
from .model import MMLatchModel, ModelConfig, baseline_forward, two_stage_forward
from .tensor import Tensor, backward, finite_difference_grad, no_grad
from .training import TrainConfig, evaluate, run_experiment, train

__version__ = "0.1.0"
