"""Context-preserving encoder-decoder CNN for pixel-level shadow
segmentation, with its training recipe and multi-scale ensemble
inference. Built on an in-package autodiff tensor core."""

from .tensor import Tensor, no_grad
from .model import CpnetModel, ModelConfig, build, build_baseline, count_parameters
from .metrics import (ConfusionCounts, EvalReport, accumulate_confusion, batch_jaccard_loss,
                      binarize, compute_ber, jaccard_loss)
from .data import AugmentParams, ImageSample, augment, load_manifest, load_sample, resize_bilinear, synth_generate
from .training import Adam, TrainConfig, TrainResult, evaluate_ber, load_checkpoint, save_checkpoint, train
from .inference import EnsembleConfig, predict_batch, predict_ensemble, predict_single_scale

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad",
    "CpnetModel", "ModelConfig", "build", "build_baseline", "count_parameters",
    "ConfusionCounts", "EvalReport", "accumulate_confusion", "batch_jaccard_loss",
    "binarize", "compute_ber", "jaccard_loss",
    "AugmentParams", "ImageSample", "augment", "load_manifest", "load_sample",
    "resize_bilinear", "synth_generate",
    "Adam", "TrainConfig", "TrainResult", "evaluate_ber", "load_checkpoint",
    "save_checkpoint", "train",
    "EnsembleConfig", "predict_batch", "predict_ensemble", "predict_single_scale",
    "__version__",
]
