"""Token-level value types shared by the engine, strategies, and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class TokenSequence:
    """One image's token state after some layer: [CLS] plus an h×w patch grid."""

    cls: np.ndarray                 # (D,)
    patches: np.ndarray             # (h*w, D)
    grid: tuple[int, int]
    layer_index: int = 0

    def __post_init__(self):
        h, w = self.grid
        if self.patches.ndim != 2 or self.patches.shape[0] != h * w:
            raise ShapeError(
                f"patch matrix {self.patches.shape} does not match grid {self.grid}")
        if self.cls.shape != (self.patches.shape[1],):
            raise ShapeError(
                f"cls shape {self.cls.shape} vs width {self.patches.shape[1]}")
        if not (np.all(np.isfinite(self.cls)) and np.all(np.isfinite(self.patches))):
            raise ShapeError("non-finite token values")

    @property
    def width(self) -> int:
        return self.patches.shape[1]

    def stacked(self) -> np.ndarray:
        """(1+hw, D) matrix with [CLS] in row 0."""
        return np.concatenate([self.cls[None, :], self.patches], axis=0)

    @classmethod
    def from_stacked(cls, mat: np.ndarray, grid: tuple[int, int],
                     layer_index: int = 0) -> "TokenSequence":
        return cls(cls=np.ascontiguousarray(mat[0]),
                   patches=np.ascontiguousarray(mat[1:]),
                   grid=grid, layer_index=layer_index)

    def with_patches(self, patches: np.ndarray) -> "TokenSequence":
        return replace(self, patches=patches)

    def at_layer(self, layer_index: int) -> "TokenSequence":
        return replace(self, layer_index=layer_index)


@dataclass(frozen=True)
class HeadFeature:
    """A_h V_h W_o for one attention head, bias excluded. Row 0 is [CLS]."""

    layer: int
    head: int
    features: np.ndarray            # (1+h*w, D)

    def patch_rows(self) -> np.ndarray:
        return self.features[1:]


@dataclass
class LayerTap:
    """Instrumentation sink: only the requested layers/heads get populated."""

    tokens: dict[int, TokenSequence] = field(default_factory=dict)
    heads: dict[tuple[int, int], HeadFeature] = field(default_factory=dict)
    attention: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


@dataclass
class AtrStats:
    """Replacement bookkeeping; all_flagged counts tokens whose entire
    neighborhood was flagged too (those are left unchanged)."""

    replaced: int = 0
    all_flagged: int = 0
