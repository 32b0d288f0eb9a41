"""Open-vocabulary segmentation: per-patch text matching, the sliding-window
protocol, and mIoU scoring.

Window fusion averages raw cosine logits over overlapping pixels (not argmax
votes), patch logits are upsampled bilinearly before any argmax, and argmax
ties resolve to the lowest class index. All stages are deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .container import TextEmbeddings
from .engine import Engine, forward
from .errors import ConfigError, DataError, ShapeError
from .imaging import resize_bilinear, resize_short_side
from .kernels import cosine_rows
from .strategies import StrategyConfig


@dataclass(frozen=True)
class ClassMap:
    labels: np.ndarray              # (H, W) int64
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.int64)
        if arr.ndim != 2:
            raise ShapeError(f"class map must be 2-d, got {arr.shape}")
        object.__setattr__(self, "labels", arr)


@dataclass(frozen=True)
class EvalMetrics:
    class_names: tuple[str, ...]
    intersection: np.ndarray        # (C,) int64
    union: np.ndarray               # (C,) int64
    iou: np.ndarray                 # (C,) float64, NaN where union == 0
    miou: float
    valid_pixels: int


class SlideConfig(BaseModel):
    """Sliding-window inference geometry. The standard profile resizes the
    short side to 336 and tiles 224 crops at stride 112; the urban-scenes
    profile swaps in a 560 short side."""

    model_config = ConfigDict(extra="forbid")

    short_side: int = Field(336, ge=1)
    crop: int = Field(224, ge=1)
    stride: int = Field(112, ge=1)

    @classmethod
    def cityscapes(cls) -> "SlideConfig":
        return cls(short_side=560)


def patch_logits(features: np.ndarray, text: TextEmbeddings) -> np.ndarray:
    """Cosine similarity of each patch feature against every class row."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != text.matrix.shape[1]:
        raise ShapeError(
            f"features {features.shape} vs text dim {text.matrix.shape[1]}")
    return cosine_rows(features, text.matrix)


def window_segment(crop: np.ndarray, engine: Engine, strategy: StrategyConfig,
                   text: TextEmbeddings) -> np.ndarray:
    """(crop, crop, 3) image → (hw, C) logits."""
    projected, _, _ = forward(crop, engine.weights, strategy)
    return patch_logits(projected, text)


def _window_origins(extent: int, crop: int, stride: int) -> list[int]:
    origins = list(range(0, extent - crop + 1, stride))
    if origins[-1] != extent - crop:
        origins.append(extent - crop)  # snap the last window to the edge
    return origins


def slide_segment(image: np.ndarray, engine: Engine, strategy: StrategyConfig,
                  text: TextEmbeddings, cfg: SlideConfig | None = None,
                  ) -> ClassMap:
    """Full-image segmentation at the input's native resolution.

    The image is resized (bilinear) so its short side hits ``cfg.short_side``,
    tiled with ``crop``/``stride`` windows (last window snapped to the edge),
    per-window logits are bilinearly upsampled to pixels and averaged where
    windows overlap, the averaged logit map is resized back to the original
    resolution, and the per-pixel argmax is taken. An image smaller than the
    crop after resizing is instead resized straight to crop size.
    """
    cfg = cfg or SlideConfig()
    if cfg.stride > cfg.crop:
        raise ConfigError(f"stride {cfg.stride} exceeds crop {cfg.crop}")
    if cfg.crop % engine.config.patch_size:
        raise ConfigError(
            f"crop {cfg.crop} not divisible by patch size {engine.config.patch_size}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected H×W×3 image, got {image.shape}")
    orig_h, orig_w = image.shape[:2]
    work = resize_short_side(image, cfg.short_side)
    if work.shape[0] < cfg.crop or work.shape[1] < cfg.crop:
        work = resize_bilinear(image, cfg.crop, cfg.crop)
    height, width = work.shape[:2]
    num_classes = text.num_classes
    grid = cfg.crop // engine.config.patch_size

    logit_sum = np.zeros((height, width, num_classes), dtype=np.float64)
    coverage = np.zeros((height, width, 1), dtype=np.float64)
    for top in _window_origins(height, cfg.crop, cfg.stride):
        for left in _window_origins(width, cfg.crop, cfg.stride):
            window = np.ascontiguousarray(
                work[top:top + cfg.crop, left:left + cfg.crop], dtype=np.float32)
            logits = window_segment(window, engine, strategy, text)
            patch_map = logits.reshape(grid, grid, num_classes).astype(np.float64)
            pixel_map = resize_bilinear(patch_map, cfg.crop, cfg.crop)
            logit_sum[top:top + cfg.crop, left:left + cfg.crop] += pixel_map
            coverage[top:top + cfg.crop, left:left + cfg.crop] += 1.0
    averaged = logit_sum / coverage
    if (height, width) != (orig_h, orig_w):
        averaged = resize_bilinear(averaged, orig_h, orig_w)
    labels = np.argmax(averaged, axis=2).astype(np.int64)  # first max wins ties
    return ClassMap(labels=labels, num_classes=num_classes)


def miou(pred: ClassMap, gt: ClassMap, ignore_index: int = 255,
         class_names: list[str] | None = None) -> EvalMetrics:
    """Per-class IoU over non-ignored pixels; classes absent from both maps
    are excluded from the mean."""
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError(
            f"prediction {pred.labels.shape} vs ground truth {gt.labels.shape}")
    num_classes = max(pred.num_classes, gt.num_classes)
    if class_names is None:
        class_names = [f"class_{c}" for c in range(num_classes)]
    if len(class_names) < num_classes:
        raise ConfigError(
            f"{len(class_names)} class names for {num_classes} classes")
    num_classes = len(class_names)
    keep = gt.labels != ignore_index
    p = pred.labels[keep]
    g = gt.labels[keep]
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        pc = p == c
        gc = g == c
        inter[c] = int(np.count_nonzero(pc & gc))
        union[c] = int(np.count_nonzero(pc | gc))
    with np.errstate(invalid="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    if not np.any(present):
        raise DataError("no class present in prediction or ground truth")
    return EvalMetrics(
        class_names=tuple(class_names),
        intersection=inter,
        union=union,
        iou=iou,
        miou=float(np.mean(iou[present])),
        valid_pixels=int(np.count_nonzero(keep)),
    )


def merge_counts(metrics: list[EvalMetrics]) -> EvalMetrics:
    """Dataset-level reduction: sum intersections and unions per class, then
    recompute IoU (the standard aggregate, not a mean of per-image mIoU)."""
    if not metrics:
        raise DataError("nothing to merge")
    names = metrics[0].class_names
    for m in metrics[1:]:
        if m.class_names != names:
            raise ConfigError("cannot merge metrics with different class lists")
    inter = np.sum([m.intersection for m in metrics], axis=0)
    union = np.sum([m.union for m in metrics], axis=0)
    with np.errstate(invalid="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    if not np.any(present):
        raise DataError("no class present after merging")
    return EvalMetrics(
        class_names=names,
        intersection=inter.astype(np.int64),
        union=union.astype(np.int64),
        iou=iou,
        miou=float(np.mean(iou[present])),
        valid_pixels=sum(m.valid_pixels for m in metrics),
    )


def write_metrics_csv(path, metrics: EvalMetrics) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["class_name", "intersection", "union", "iou"])
        for i, name in enumerate(metrics.class_names):
            iou = metrics.iou[i]
            out.writerow([name, int(metrics.intersection[i]), int(metrics.union[i]),
                          "" if np.isnan(iou) else f"{iou:.8f}"])
        out.writerow(["mIoU", "", "", f"{metrics.miou:.8f}"])
