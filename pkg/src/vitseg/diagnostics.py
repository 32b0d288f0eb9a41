"""Layer/head/token measurement protocols and their CSV serializations.

Per-layer visual discriminability: how well pairwise patch-feature cosine
separates same-class from different-class patch pairs (ROC AUC, per image,
averaged over images). Semantic alignment: per-patch classification accuracy
after pushing intermediate tokens through a stripped final layer into the
text space. Head ranking orders (layer, head) pairs by mean discriminability
of their features, final layer excluded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import TextEmbeddings, VitConfig, VitWeights
from .engine import TapRequest, final_layer_features, forward, project
from .errors import DataError, ShapeError
from .imaging import (center_crop, load_image, load_label_map,
                      patch_labels_from_pixels, resize_nearest, resize_short_side)
from .kernels import cosine_rows
from .measures import AbnormalCriterion, detect_abnormal_rows, rank_auc
from .strategies import AtrSettings, StrategyConfig, atr_rows
from .types import TokenSequence


@dataclass(frozen=True)
class PatchLabels:
    """Per-patch class indices on the token grid; ignore_index marks patches
    excluded from every statistic."""

    labels: np.ndarray              # (h*w,) int
    grid: tuple[int, int]
    ignore_index: int = 255

    def __post_init__(self):
        h, w = self.grid
        arr = np.asarray(self.labels, dtype=np.int64)
        if arr.shape != (h * w,):
            raise ShapeError(f"labels {arr.shape} vs grid {self.grid}")
        object.__setattr__(self, "labels", arr)

    def valid_mask(self) -> np.ndarray:
        return self.labels != self.ignore_index


@dataclass
class DiscriminabilityReport:
    layer_auc: dict[int, float] = field(default_factory=dict)
    layer_alignment: dict[int, float] = field(default_factory=dict)
    head_auc: dict[tuple[int, int], dict[str, float]] = field(default_factory=dict)
    sample_count: int = 0


def discriminability_auc(features: np.ndarray, labels: PatchLabels) -> float:
    """AUC of cosine similarity over all unordered within-image patch pairs,
    same-class pairs positive. Exact rank statistic, ties counted half."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] != labels.labels.shape[0]:
        raise ShapeError(
            f"features {features.shape} vs {labels.labels.shape[0]} patch labels")
    keep = labels.valid_mask()
    feats = features[keep]
    lab = labels.labels[keep]
    if feats.shape[0] < 2 or np.unique(lab).size < 2:
        raise DataError("discriminability needs ≥2 classes among valid patches")
    sims = cosine_rows(feats, feats)
    iu = np.triu_indices(feats.shape[0], k=1)
    scores = sims[iu].astype(np.float64)
    positive = lab[iu[0]] == lab[iu[1]]
    return rank_auc(scores, positive)


def alignment_accuracy(x: TokenSequence, weights: VitWeights,
                       text: TextEmbeddings, labels: PatchLabels) -> float:
    """Project layer-``x`` tokens through the final layer's value path (identity
    attention, no residual, no FFN) into the text space; fraction of valid
    patches whose nearest text row matches their label."""
    feats = final_layer_features(x, weights.layers[-1],
                                 "identity_no_ffn_no_residual", weights.config)
    projected = project(feats, weights)
    logits = cosine_rows(projected, text.matrix)
    pred = np.argmax(logits, axis=1)
    keep = labels.valid_mask()
    if not np.any(keep):
        raise DataError("alignment accuracy needs at least one valid patch")
    return float(np.mean(pred[keep] == labels.labels[keep]))


def load_labeled_sample(image_path, labels_path, cfg: VitConfig,
                        ignore_index: int = 255,
                        ) -> tuple[np.ndarray, PatchLabels]:
    """Read an image + pixel-label pair from disk and fit both to the model.

    Images that are not already at the model's native size get the standard
    short-side resize and center crop; labels follow with nearest-neighbor
    resampling, then collapse to patch granularity by majority vote.
    """
    image = load_image(image_path)
    side = cfg.image_size
    if image.shape[:2] != (side, side):
        image = center_crop(resize_short_side(image, side), side)
    image = np.ascontiguousarray(image, dtype=np.float32)
    labels = load_label_map(labels_path)
    if labels.shape != (side, side):
        labels = resize_nearest(labels, side, side)
    patch = patch_labels_from_pixels(labels, cfg.patch_size, ignore_index)
    grid = (side // cfg.patch_size, side // cfg.patch_size)
    return image, PatchLabels(labels=patch, grid=grid, ignore_index=ignore_index)


# ---------------------------------------------------------------------------
# sweeps


def map_samples(fn, items, workers: int = 1) -> list:
    """Order-preserving worker pool used by the sweep protocols.

    Results come back in input order regardless of worker count, so every
    downstream reduction is bit-identical to the sequential run.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def layer_sweep(samples: list[tuple[np.ndarray, PatchLabels]],
                weights: VitWeights, text: TextEmbeddings,
                workers: int = 1) -> DiscriminabilityReport:
    """Per-layer discriminability and alignment, averaged over samples.
    Layers 1..L-1; the final layer is excluded by protocol."""
    if not samples:
        raise DataError("layer sweep needs at least one sample")
    num_layers = weights.config.layers
    layers = list(range(1, num_layers))
    taps = TapRequest.of(layers=layers)
    noop = StrategyConfig.disabled()

    def measure(sample):
        image, labels = sample
        _, tap, _ = forward(image, weights, noop, taps)
        per_auc = {}
        per_align = {}
        for layer in layers:
            seq = tap.tokens[layer]
            per_auc[layer] = discriminability_auc(seq.patches, labels)
            per_align[layer] = alignment_accuracy(seq, weights, text, labels)
        return per_auc, per_align

    results = map_samples(measure, samples, workers)
    report = DiscriminabilityReport(sample_count=len(samples))
    for layer in layers:
        report.layer_auc[layer] = float(np.mean([r[0][layer] for r in results]))
        report.layer_alignment[layer] = float(np.mean([r[1][layer] for r in results]))
    return report


@dataclass(frozen=True)
class HeadScore:
    layer: int
    head: int
    mean_auc: float
    per_dataset: tuple[tuple[str, float], ...]


def rank_heads(samples: list[tuple[np.ndarray, PatchLabels]],
               weights: VitWeights,
               datasets: list[str] | None = None,
               atr_settings: AtrSettings | None = None,
               workers: int = 1) -> list[HeadScore]:
    """Order all heads of layers 1..L-1 by mean feature discriminability.

    Head features get abnormal-token replacement (detected on each head's own
    feature map) before scoring. Per-image AUCs average within each dataset
    tag first, then across datasets; sort is stable descending with ties
    broken by (layer, head) ascending.
    """
    if not samples:
        raise DataError("head ranking needs at least one sample")
    if datasets is None:
        datasets = ["default"] * len(samples)
    if len(datasets) != len(samples):
        raise DataError(f"{len(datasets)} dataset tags for {len(samples)} samples")
    atr_settings = atr_settings or AtrSettings()
    criterion = atr_settings.to_criterion() if atr_settings.enabled else None

    cfg = weights.config
    head_keys = [(l, h) for l in range(1, cfg.layers) for h in range(1, cfg.heads + 1)]
    taps = TapRequest.of(heads=head_keys)
    noop = StrategyConfig.disabled()

    def measure(sample):
        image, labels = sample
        _, tap, _ = forward(image, weights, noop, taps)
        out = {}
        for key in head_keys:
            rows = tap.heads[key].patch_rows()
            if criterion is not None:
                flagged = detect_abnormal_rows(rows, criterion)
                rows = atr_rows(rows, labels.grid, flagged)
            out[key] = discriminability_auc(rows, labels)
        return out

    results = map_samples(measure, samples, workers)
    per_head: dict[tuple[int, int], dict[str, list[float]]] = {
        key: {} for key in head_keys}
    for by_key, tag in zip(results, datasets):
        for key in head_keys:
            per_head[key].setdefault(tag, []).append(by_key[key])

    scores = []
    for key in head_keys:
        by_ds = {tag: float(np.mean(v)) for tag, v in per_head[key].items()}
        mean = float(np.mean(list(by_ds.values())))
        scores.append(HeadScore(layer=key[0], head=key[1], mean_auc=mean,
                                per_dataset=tuple(sorted(by_ds.items()))))
    scores.sort(key=lambda s: (-s.mean_auc, s.layer, s.head))
    return scores


def hoyer_map(image: np.ndarray, weights: VitWeights,
              ) -> list[tuple[int, int, int, float]]:
    """(layer, row, col, score) for every patch position at every layer."""
    from .engine import layer_forward, tokenize
    from .measures import hoyer_scores

    x = tokenize(image, weights)
    h, w = x.grid
    rows: list[tuple[int, int, int, float]] = []
    for layer in range(1, weights.config.layers + 1):
        x = layer_forward(x, weights.layers[layer - 1], cfg=weights.config,
                          layer_index=layer)
        scores = hoyer_scores(x.patches)
        for idx in range(h * w):
            rows.append((layer, idx // w, idx % w, float(scores[idx])))
    return rows


# ---------------------------------------------------------------------------
# CSV serialization (fixed 8-decimal floats, deterministic row order)


def _fmt(x: float) -> str:
    return f"{x:.8f}"


def write_layer_csv(path, report: DiscriminabilityReport) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["layer", "auc", "alignment"])
        for layer in sorted(report.layer_auc):
            out.writerow([layer, _fmt(report.layer_auc[layer]),
                          _fmt(report.layer_alignment.get(layer, float("nan")))])


def write_head_csv(path, scores: list[HeadScore]) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["layer", "head", "dataset", "auc"])
        for score in scores:
            for tag, auc in score.per_dataset:
                out.writerow([score.layer, score.head, tag, _fmt(auc)])


def write_hoyer_csv(path, rows: list[tuple[int, int, int, float]]) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["layer", "row", "col", "score"])
        for layer, r, c, score in rows:
            out.writerow([layer, r, c, _fmt(score)])


def write_ranking(path, scores: list[HeadScore]) -> None:
    import json
    payload = {
        "heads": [[s.layer, s.head] for s in scores],
        "mean_auc": [round(s.mean_auc, 8) for s in scores],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
