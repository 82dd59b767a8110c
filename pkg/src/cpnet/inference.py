"""Multi-scale prediction with mask ensembling and batch evaluation."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_manifest, load_mask, load_image_rgb, resize_bilinear, save_mask
from .metrics import ConfusionCounts, EvalReport, accumulate_confusion, binarize, compute_ber
from .model import CpnetModel
from .tensor import Tensor, no_grad

DEFAULT_SCALES = (192, 256, 384, 480)
ENSEMBLE_MODES = ("or_of_masks", "threshold_of_mean")


@dataclass
class EnsembleConfig:
    scales: tuple[int, ...] = DEFAULT_SCALES
    mode: str = "or_of_masks"
    threshold: float = 0.5

    def __post_init__(self):
        if not self.scales:
            raise ValueError("at least one scale is required")
        for s in self.scales:
            if s % 32:
                raise ValueError(f"scale {s} not divisible by 32")
        if self.mode not in ENSEMBLE_MODES:
            raise ValueError(f"mode must be one of {ENSEMBLE_MODES}, got {self.mode!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold}")


def predict_single_scale(model: CpnetModel, rgb: np.ndarray, scale: int) -> np.ndarray:
    """Probability map at the input's original resolution: resize to
    scale x scale, run the network, resize the output back."""
    if scale % 32:
        raise ValueError(f"scale {scale} not divisible by 32")
    h0, w0 = rgb.shape[1:]
    model.eval()
    with no_grad():
        x = Tensor(resize_bilinear(rgb, scale, scale)[None])
        prob = model.forward(x).data[0]
    return resize_bilinear(prob, h0, w0)


def predict_ensemble(model: CpnetModel, rgb: np.ndarray, config: EnsembleConfig) -> np.ndarray:
    """Binary mask (uint8, (1,H0,W0)) merged across scales.

    ``or_of_masks`` binarizes each scale's map and ORs them;
    ``threshold_of_mean`` averages the maps before thresholding.
    """
    maps = [predict_single_scale(model, rgb, s) for s in config.scales]
    if config.mode == "or_of_masks":
        out = np.zeros_like(maps[0], dtype=np.uint8)
        for m in maps:
            out |= binarize(m, config.threshold)
        return out
    mean = np.mean(np.stack(maps), axis=0)
    return binarize(mean, config.threshold)


@dataclass
class BatchPredictResult:
    report: EvalReport | None
    mask_paths: list[Path]
    skipped: list[str] = field(default_factory=list)
    has_ground_truth: bool = False


def predict_batch(model: CpnetModel, manifest_path, config: EnsembleConfig,
                  out_dir) -> BatchPredictResult:
    """Predict every manifest entry, writing `<stem>_mask.png` files
    (255 = shadow) into out_dir; aggregates an evaluation report when
    ground-truth masks are available."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = load_manifest(manifest_path)
    counts = ConfusionCounts()
    have_truth = False
    mask_paths: list[Path] = []
    skipped: list[str] = []
    for img_path, truth_path in pairs:
        try:
            rgb = load_image_rgb(img_path)
        except (OSError, ValueError) as exc:
            print(f"warning: skipping {img_path}: {exc}", file=sys.stderr)
            skipped.append(str(img_path))
            continue
        mask = predict_ensemble(model, rgb, config)
        out_path = out_dir / f"{Path(img_path).stem}_mask.png"
        save_mask(out_path, mask)
        mask_paths.append(out_path)
        if truth_path is not None:
            truth = load_mask(truth_path)
            counts = accumulate_confusion(mask, truth, counts)
            have_truth = True
    report = compute_ber(counts) if have_truth else None
    return BatchPredictResult(report=report, mask_paths=mask_paths,
                              skipped=skipped, has_ground_truth=have_truth)
