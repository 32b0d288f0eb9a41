"""Sparsity scoring, abnormal-token detection, and the exact ROC AUC statistic.

Nothing here touches model weights; everything operates on plain arrays or
TokenSequence values, so the functions double as oracles for higher layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericsError, ShapeError
from .types import TokenSequence


def hoyer_score(x: np.ndarray) -> float:
    """Normalized L1/L2 sparsity in [0, 1]: 1.0 for a one-hot vector, 0.0 when
    every component has the same magnitude."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    if d < 2:
        raise ShapeError(f"need at least 2 components, got {d}")
    l2 = float(np.sqrt(np.sum(x * x)))
    if l2 == 0.0:
        raise NumericsError("hoyer score undefined for the zero vector")
    l1 = float(np.sum(np.abs(x)))
    sqrt_d = float(np.sqrt(d))
    return (sqrt_d - l1 / l2) / (sqrt_d - 1.0)


def hoyer_scores(rows: np.ndarray) -> np.ndarray:
    """Row-wise hoyer_score; float64 output."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ShapeError(f"expected n×D with D ≥ 2, got {rows.shape}")
    l2 = np.sqrt(np.sum(rows * rows, axis=1))
    if np.any(l2 == 0.0):
        raise NumericsError("hoyer score undefined for a zero row")
    l1 = np.sum(np.abs(rows), axis=1)
    sqrt_d = np.sqrt(rows.shape[1])
    return (sqrt_d - l1 / l2) / (sqrt_d - 1.0)


@dataclass(frozen=True)
class AbnormalCriterion:
    """Detection rule: sparsity (hoyer score above tau) or norm (L2 above gamma)."""

    kind: str                       # "sparsity" | "norm"
    threshold: float

    def __post_init__(self):
        if self.kind == "sparsity":
            # 1.0 is allowed and flags nothing: scores never strictly exceed it
            if not 0.0 < self.threshold <= 1.0:
                raise ConfigError(f"sparsity threshold must be in (0,1], got {self.threshold}")
        elif self.kind == "norm":
            if not self.threshold > 0.0:
                raise ConfigError(f"norm threshold must be positive, got {self.threshold}")
        else:
            raise ConfigError(f"unknown detection criterion {self.kind!r}")


def detect_abnormal_rows(rows: np.ndarray, criterion: AbnormalCriterion) -> set[int]:
    """Indices of rows strictly exceeding the criterion threshold."""
    if criterion.kind == "sparsity":
        scores = hoyer_scores(rows)
    else:
        rows64 = np.asarray(rows, dtype=np.float64)
        scores = np.sqrt(np.sum(rows64 * rows64, axis=1))
    return {int(i) for i in np.nonzero(scores > criterion.threshold)[0]}


def detect_abnormal(x: TokenSequence, criterion: AbnormalCriterion) -> set[int]:
    """Flagged patch positions (flat grid indices). [CLS] is never flagged."""
    return detect_abnormal_rows(x.patches, criterion)


# ---------------------------------------------------------------------------
# exact-rank AUC

# Ranks are averaged over tie groups, so the numerator is a half-integer and
# exactly representable; this makes the statistic bit-equal to brute-force
# pair counting, which the test suite asserts.


def average_ranks(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """AUC of ``scores`` as a classifier for the boolean ``positive`` mask,
    ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if scores.shape != positive.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {positive.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericsError("non-finite similarity scores")
    n_pos = int(np.count_nonzero(positive))
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative pair")
    ranks = average_ranks(scores)
    numerator = float(np.sum(ranks[positive])) - n_pos * (n_pos + 1) / 2.0
    return numerator / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# abnormal-token similarity summary


@dataclass(frozen=True)
class AbnormalStats:
    count: int
    mean_cosine: float | None = None
    min_cosine: float | None = None
    mean_cosine_to_cls: float | None = None
    mean_cosine_to_normal_mean: float | None = None

    @property
    def empty(self) -> bool:
        return self.count < 2


def replace_stats(sequences, criterion: AbnormalCriterion) -> AbnormalStats:
    """Pairwise-cosine summary of every abnormal token found across the given
    sequences (any mix of layers and samples). Fewer than two detections yield
    an empty report rather than an error."""
    abnormal: list[np.ndarray] = []
    cls_cosines: list[float] = []
    normal_cosines: list[float] = []
    for seq in sequences:
        flagged = detect_abnormal(seq, criterion)
        if not flagged:
            continue
        normal_idx = [i for i in range(seq.patches.shape[0]) if i not in flagged]
        normal_mean = (np.mean(seq.patches[normal_idx].astype(np.float64), axis=0)
                       if normal_idx else None)
        for i in sorted(flagged):
            v = seq.patches[i].astype(np.float64)
            abnormal.append(v)
            cls_cosines.append(_cos(v, seq.cls.astype(np.float64)))
            if normal_mean is not None:
                normal_cosines.append(_cos(v, normal_mean))
    if len(abnormal) < 2:
        return AbnormalStats(count=len(abnormal))
    mat = np.stack(abnormal)
    norms = np.sqrt(np.sum(mat * mat, axis=1))
    unit = mat / norms[:, None]
    sims = unit @ unit.T
    iu = np.triu_indices(len(abnormal), k=1)
    pair = sims[iu]
    return AbnormalStats(
        count=len(abnormal),
        mean_cosine=float(np.mean(pair)),
        min_cosine=float(np.min(pair)),
        mean_cosine_to_cls=float(np.mean(cls_cosines)),
        mean_cosine_to_normal_mean=(float(np.mean(normal_cosines))
                                    if normal_cosines else None),
    )


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.sqrt(np.sum(a * a)))
    nb = float(np.sqrt(np.sum(b * b)))
    if na == 0.0 or nb == 0.0:
        raise NumericsError("cosine undefined against a zero vector")
    return float(np.dot(a, b) / (na * nb))
