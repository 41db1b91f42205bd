"""Gated color/thermal fusion for single-shot pedestrian detection.

Toy-scale but complete: a rank-4 autodiff core, gated fusion units, the
seven fusion topologies with exact anchor accounting, hard-negative-mined
detection loss, log-average miss rate evaluation, a synthetic two-modality
data pipeline, and a deterministic SGD trainer behind one CLI.
"""

__version__ = "0.1.0"

from .autodiff import Parameter, Tensor, backward, check_gradients, sgd_step
from .config import SCHEMA, ConfigError, read_config_file, resolve
from .data import GroundTruth, ImagePair, SynthSpec, clahe, load_dataset, save_dataset, synth_dataset
from .detection import Box, Detection, DetectionHeads, iou, match_anchors, nms
from .gfu import GfuParams, gfu_forward, init_gfu_params
from .losses import LossBreakdown, LossWeights, detection_loss
from .metrics import EvalResult, evaluate, log_average_miss_rate, miss_rate_fppi_curve
from .topology import VARIANTS, anchor_count, build_topology, enumerate_anchors, toy_geometry
from .training import (
    DetectionModel,
    TrainConfig,
    TrainingDiverged,
    evaluate_dataset,
    load_checkpoint,
    predict_pair,
    save_checkpoint,
    train,
)

__all__ = [
    "__version__",
    "Parameter",
    "Tensor",
    "backward",
    "check_gradients",
    "sgd_step",
    "SCHEMA",
    "ConfigError",
    "read_config_file",
    "resolve",
    "GroundTruth",
    "ImagePair",
    "SynthSpec",
    "clahe",
    "load_dataset",
    "save_dataset",
    "synth_dataset",
    "Box",
    "Detection",
    "DetectionHeads",
    "iou",
    "match_anchors",
    "nms",
    "GfuParams",
    "gfu_forward",
    "init_gfu_params",
    "LossBreakdown",
    "LossWeights",
    "detection_loss",
    "EvalResult",
    "evaluate",
    "log_average_miss_rate",
    "miss_rate_fppi_curve",
    "VARIANTS",
    "anchor_count",
    "build_topology",
    "enumerate_anchors",
    "toy_geometry",
    "DetectionModel",
    "TrainConfig",
    "TrainingDiverged",
    "evaluate_dataset",
    "load_checkpoint",
    "predict_pair",
    "save_checkpoint",
    "train",
]
