"""The three inference-time interventions and their configuration tree.

Layer and head indices in configs, profiles, and CSV output are 1-based
(layer 1 is the first encoder layer, layer L the final one; heads count from
1 inside each layer). The engine translates to 0-based storage indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, ShapeError
from .measures import AbnormalCriterion
from .types import AtrStats, HeadFeature, TokenSequence


class AtrSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    criterion: Literal["sparsity", "norm"] = "sparsity"
    threshold: float = 0.5
    apply_to_heads: bool = True
    # For head features: detect anomalies on the head feature map itself
    # ("self") or reuse the token-stream detections ("sequence").
    head_detection: Literal["self", "sequence"] = "self"

    @model_validator(mode="after")
    def _check_threshold(self):
        AbnormalCriterion(self.criterion, self.threshold)
        return self

    def to_criterion(self) -> AbnormalCriterion:
        return AbnormalCriterion(self.criterion, self.threshold)


class SsrSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    alpha: float = Field(0.1, ge=0.0, le=1.0)
    start_layer: int = Field(10, ge=1)
    end_layer: int = Field(11, ge=1)

    @model_validator(mode="after")
    def _check_range(self):
        if self.start_layer > self.end_layer:
            raise ValueError(
                f"start_layer {self.start_layer} > end_layer {self.end_layer}")
        return self


class SheSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    heads: Optional[list[tuple[int, int]]] = None
    top_k: Optional[int] = Field(None, ge=1)
    ranking_file: Optional[str] = None
    beta: float = Field(0.7, ge=0.0, le=1.0)
    normalize_axis: Literal["row", "column"] = "row"

    @model_validator(mode="after")
    def _check_source(self):
        if self.enabled:
            if self.heads is None and self.top_k is None:
                raise ValueError("she needs either an explicit head list or top_k")
            if self.top_k is not None and self.heads is None and self.ranking_file is None:
                raise ValueError("top_k selection needs a ranking_file")
        return self


class SkipSettings(BaseModel):
    """Direct layer-skip baseline; disabled in every standard profile."""

    model_config = ConfigDict(extra="forbid")

    enabled: bool = False
    skip_from: int = Field(1, ge=1)
    resume_at: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_range(self):
        if self.skip_from > self.resume_at:
            raise ValueError(
                f"skip_from {self.skip_from} > resume_at {self.resume_at}")
        return self


Variant = Literal["vanilla", "identity_no_ffn_no_residual", "sclip_qqkk", "clearclip"]


class StrategyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    atr: AtrSettings = AtrSettings()
    ssr: SsrSettings = SsrSettings()
    she: SheSettings = SheSettings(heads=[])
    skip: SkipSettings = SkipSettings()
    variant: Variant = "vanilla"
    model_profile: Literal["vitb", "vitl", "custom"] = "custom"

    @classmethod
    def disabled(cls, variant: Variant = "vanilla") -> "StrategyConfig":
        return cls(atr=AtrSettings(enabled=False),
                   ssr=SsrSettings(enabled=False),
                   she=SheSettings(enabled=False, heads=[]),
                   variant=variant)

    @classmethod
    def from_dict(cls, data: dict) -> "StrategyConfig":
        profile = data.get("model_profile")
        try:
            if profile in ("vitb", "vitl"):
                base = (vitb_defaults() if profile == "vitb" else vitl_defaults())
                merged = _deep_merge(base.model_dump(), data)
                return cls.model_validate(merged)
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"invalid strategy config: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "StrategyConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def validate_for_model(self, num_layers: int) -> None:
        """Layer-count-dependent checks that pydantic cannot do alone."""
        if self.ssr.enabled and not (self.ssr.start_layer >= 1
                                     and self.ssr.end_layer <= num_layers - 1):
            raise ConfigError(
                f"ssr range [{self.ssr.start_layer},{self.ssr.end_layer}] must lie in "
                f"[1,{num_layers - 1}] for a {num_layers}-layer model")
        if self.she.enabled:
            for layer, head in self.she_heads():
                if layer >= num_layers:
                    raise ConfigError(
                        f"she head ({layer},{head}) sits in the final layer "
                        f"of a {num_layers}-layer model")
                if layer < 1:
                    raise ConfigError(f"she head ({layer},{head}) has layer < 1")
        if self.skip.enabled and not self.skip.resume_at <= num_layers:
            raise ConfigError(
                f"skip resume_at {self.skip.resume_at} beyond {num_layers} layers")

    def she_heads(self) -> list[tuple[int, int]]:
        """The (layer, head) list SHE will aggregate, resolving top_k files."""
        if not self.she.enabled:
            return []
        if self.she.heads is not None:
            heads = [tuple(h) for h in self.she.heads]
            return heads[: self.she.top_k] if self.she.top_k else heads
        ranked = load_ranking(self.she.ranking_file)
        return ranked[: self.she.top_k]


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_ranking(path) -> list[tuple[int, int]]:
    """Read a head-ranking file (JSON: {"heads": [[layer, head], ...]})."""
    if path is None:
        raise ConfigError("no ranking file given")
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read ranking {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"ranking {path} is not valid JSON: {exc}") from exc
    heads = data.get("heads") if isinstance(data, dict) else None
    if not isinstance(heads, list) or not all(
            isinstance(h, (list, tuple)) and len(h) == 2 for h in heads):
        raise ConfigError(f"ranking {path} must hold {{'heads': [[layer, head], ...]}}")
    return [(int(l), int(h)) for l, h in heads]


# ---------------------------------------------------------------------------
# canonical profiles

VITB_HEADS: tuple[tuple[int, int], ...] = (
    (8, 9), (8, 8), (7, 10), (9, 12), (7, 3),
    (9, 4), (5, 1), (9, 6), (4, 11), (8, 6),
)

VITL_HEADS: tuple[tuple[int, int], ...] = (
    (11, 3), (9, 3), (7, 9), (11, 6), (10, 10), (9, 13), (3, 10), (4, 14),
    (10, 6), (6, 9), (7, 12), (14, 16), (11, 8), (10, 13), (8, 4), (8, 8),
    (10, 8), (9, 4), (2, 11), (9, 6), (8, 1), (14, 1), (16, 2), (4, 13),
    (13, 11), (11, 14), (7, 4), (14, 11), (13, 13), (3, 13),
)


def vitb_defaults() -> StrategyConfig:
    return StrategyConfig(
        atr=AtrSettings(enabled=True, criterion="sparsity", threshold=0.5),
        ssr=SsrSettings(enabled=True, alpha=0.1, start_layer=10, end_layer=11),
        she=SheSettings(enabled=True, heads=list(VITB_HEADS), beta=0.7),
        variant="vanilla",
        model_profile="vitb",
    )


def vitl_defaults() -> StrategyConfig:
    return StrategyConfig(
        atr=AtrSettings(enabled=True, criterion="sparsity", threshold=0.4),
        ssr=SsrSettings(enabled=True, alpha=0.1, start_layer=17, end_layer=23),
        she=SheSettings(enabled=True, heads=list(VITL_HEADS), beta=0.7),
        variant="vanilla",
        model_profile="vitl",
    )


# ---------------------------------------------------------------------------
# abnormal token replacement


def _neighbor_indices(idx: int, grid: tuple[int, int]) -> list[int]:
    h, w = grid
    m, n = divmod(idx, w)
    out = []
    for dm in (-1, 0, 1):
        for dn in (-1, 0, 1):
            if dm == 0 and dn == 0:
                continue
            mm, nn = m + dm, n + dn
            if 0 <= mm < h and 0 <= nn < w:
                out.append(mm * w + nn)
    return out


def atr(x: TokenSequence, positions: set[int],
        stats: AtrStats | None = None) -> TokenSequence:
    """Replace each flagged patch by the plain mean of its unflagged in-grid
    8-neighbors. A token whose whole neighborhood is flagged is left alone.
    [CLS] and unflagged patches pass through bit-identical."""
    hw = x.patches.shape[0]
    for idx in positions:
        if not 0 <= idx < hw:
            raise ShapeError(f"flagged position {idx} outside grid {x.grid}")
    if not positions:
        return x
    out = x.patches.copy()
    for idx in sorted(positions):
        donors = [j for j in _neighbor_indices(idx, x.grid) if j not in positions]
        if not donors:
            if stats is not None:
                stats.all_flagged += 1
            continue
        mean = np.mean(x.patches[donors].astype(np.float64), axis=0)
        out[idx] = mean.astype(np.float32)
        if stats is not None:
            stats.replaced += 1
    return x.with_patches(out)


def atr_rows(rows: np.ndarray, grid: tuple[int, int], positions: set[int],
             stats: AtrStats | None = None) -> np.ndarray:
    """atr over a bare (hw, D) matrix (used for per-head feature maps)."""
    seq = TokenSequence(cls=np.zeros(rows.shape[1], dtype=np.float32),
                        patches=np.ascontiguousarray(rows, dtype=np.float32),
                        grid=grid)
    return atr(seq, positions, stats).patches


# ---------------------------------------------------------------------------
# selective head enhancement


@dataclass(frozen=True)
class PseudoMask:
    matrix: np.ndarray              # (hw, hw), nonnegative
    beta: float
    source_heads: tuple[tuple[int, int], ...]
    normalize_axis: str = "row"


def she_mask(heads: list[HeadFeature], beta: float,
             normalize_axis: str = "row") -> PseudoMask:
    """Aggregate head features, threshold their pairwise token cosines at
    ``beta``, and normalize so each output token's weights sum to 1."""
    if not heads:
        raise ConfigError("she_mask needs at least one head feature")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0,1], got {beta}")
    if normalize_axis not in ("row", "column"):
        raise ConfigError(f"unknown normalize_axis {normalize_axis!r}")
    stack = np.stack([h.patch_rows().astype(np.float64) for h in heads])
    mean = stack.mean(axis=0)
    norms = np.sqrt(np.sum(mean * mean, axis=1))
    if np.any(norms == 0.0):
        raise ShapeError("zero-norm aggregated token row in she_mask")
    unit = mean / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, 1.0)  # self-cosine must survive any beta ≤ 1
    sims[sims < beta] = 0.0
    if normalize_axis == "row":
        sims /= sims.sum(axis=1, keepdims=True)
    else:
        sims /= sims.sum(axis=0, keepdims=True)
    return PseudoMask(matrix=sims.astype(np.float32), beta=beta,
                      source_heads=tuple((h.layer, h.head) for h in heads),
                      normalize_axis=normalize_axis)


def apply_she(x: TokenSequence, mask: PseudoMask) -> TokenSequence:
    hw = x.patches.shape[0]
    if mask.matrix.shape != (hw, hw):
        raise ShapeError(
            f"mask {mask.matrix.shape} does not fit {hw} patches")
    mixed = mask.matrix.astype(np.float64) @ x.patches.astype(np.float64)
    return x.with_patches(mixed.astype(np.float32))


# ---------------------------------------------------------------------------
# direct-skip baseline


def direct_skip(x: TokenSequence, weights, skip_from: int,
                resume_at: int) -> TokenSequence:
    """Standard forward over all layers except [skip_from, resume_at-1]
    (1-based, inclusive-exclusive); skip_from == resume_at skips nothing."""
    from .engine import layer_forward  # runtime import; engine imports this module

    num_layers = weights.config.layers
    if not (1 <= skip_from <= resume_at <= num_layers):
        raise ConfigError(
            f"invalid skip range [{skip_from},{resume_at}) for {num_layers} layers")
    out = x
    for layer in range(1, num_layers + 1):
        if skip_from <= layer < resume_at:
            continue
        out = layer_forward(out, weights.layers[layer - 1], layer_index=layer,
                            cfg=weights.config)
    return out
