"""Hyperspectral video object tracking.

A Siamese tracker for many-band video: a factored 3-D convolution
backbone, band-wise transformer interaction between template and search
regions fused via the inclusion-exclusion principle, a material-
consistency spectral loss, an online tracking loop with a momentum
template update, plus synthetic data generation and OTB-style evaluation.
"""

from .geometry import BoundingBox
from .hsv_io import (
    FormatError,
    HSVFrame,
    HSVSequence,
    IntegrityError,
    SynthSpec,
    crop_patch,
    generate_synthetic,
    load_sequence,
    save_sequence,
)
from .loss import LossWeights, iou, partition_regions, region_mean_spectra, spectral_loss, total_loss
from .metrics import EvalCurve, SequenceResult, auc, dp_at, evaluate_sequences, precision_curve, success_curve
from .model import ModelConfig, TrackerNet, load_checkpoint, save_checkpoint
from .tracker import TrackerConfig, TrackerState, decode_box, track_frame, track_sequence, tracker_init, update_template
from .train import TrainConfig, augment, fit, sample_pair, train_step

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "EvalCurve",
    "FormatError",
    "HSVFrame",
    "HSVSequence",
    "IntegrityError",
    "LossWeights",
    "ModelConfig",
    "SequenceResult",
    "SynthSpec",
    "TrackerConfig",
    "TrackerNet",
    "TrackerState",
    "TrainConfig",
    "auc",
    "augment",
    "crop_patch",
    "decode_box",
    "dp_at",
    "evaluate_sequences",
    "fit",
    "generate_synthetic",
    "iou",
    "load_checkpoint",
    "load_sequence",
    "partition_regions",
    "precision_curve",
    "region_mean_spectra",
    "sample_pair",
    "save_checkpoint",
    "save_sequence",
    "spectral_loss",
    "success_curve",
    "total_loss",
    "track_frame",
    "track_sequence",
    "tracker_init",
    "train_step",
    "update_template",
]
