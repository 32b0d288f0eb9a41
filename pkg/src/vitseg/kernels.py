"""Dense float32 kernels used by every other module.

Conventions:

* All tensors are C-contiguous ``numpy.float32`` arrays, row-major.
* Dot products accumulate in float64 and round once to float32, so
  repeated calls on identical inputs are bit-identical.
* Non-finite values anywhere in a kernel output are a hard error.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericsError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def as_f32(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {where}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to float32."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return check_finite(out, "matmul output")


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = 1e-5) -> np.ndarray:
    """Per-row layer normalization with a 1/D variance divisor."""
    x = as_f32(x)
    gain = as_f32(gain)
    bias = as_f32(bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects an n x D matrix, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    var = x64.var(axis=1, keepdims=True)  # population variance, 1/D
    out = (x64 - mean) / np.sqrt(var + eps) * gain.astype(np.float64) + bias.astype(np.float64)
    return check_finite(out.astype(np.float32), "layer_norm output")


def row_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    x = as_f32(x)
    if x.ndim != 2:
        raise ShapeError(f"row_softmax expects an n x m matrix, got {x.shape}")
    check_finite(x, "row_softmax input")
    x64 = x.astype(np.float64)
    x64 -= x64.max(axis=1, keepdims=True)
    e = np.exp(x64)
    out = e / e.sum(axis=1, keepdims=True)
    return check_finite(out.astype(np.float32), "row_softmax output")


def gelu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * Phi(x) with the exact Gaussian CDF (erf form)."""
    x = as_f32(x)
    x64 = x.astype(np.float64)
    out = 0.5 * x64 * (1.0 + erf(x64 * _INV_SQRT2))
    return check_finite(out.astype(np.float32), "gelu output")


def row_norms(x: np.ndarray) -> np.ndarray:
    """Float64 L2 norm of each row."""
    return np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows expects n x D and m x D, got {a.shape} / {b.shape}")
    na = row_norms(a)
    nb = row_norms(b)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ShapeError("cosine_rows: zero-norm row")
    sim = (a.astype(np.float64) / na[:, None]) @ (b.astype(np.float64) / nb[:, None]).T
    return check_finite(sim.astype(np.float32), "cosine_rows output")
