"""Desk-scale RGB-IR fusion object detector with a self-contained
reverse-mode tensor core, selective-scan state-space blocks, and
deformable token extraction."""

from .autodiff import (AlignmentError, ConfigError, NumericError, Tape,
                       Tensor, UsageError, grad_check, no_grad, precision)
from .config import ModelConfig, TrainConfig, load_config, tiny_config
from .detect import DetectionBox, decode_boxes, eval_map
from .model import Detector, build_detector
from .train import train

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "ConfigError", "NumericError", "UsageError",
    "Tape", "Tensor", "grad_check", "no_grad", "precision",
    "ModelConfig", "TrainConfig", "load_config", "tiny_config",
    "DetectionBox", "decode_boxes", "eval_map",
    "Detector", "build_detector", "train",
    "__version__",
]
