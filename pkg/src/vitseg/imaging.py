"""Image IO and deterministic resampling.

Resamplers use half-pixel sample centers with edge clamping, the convention
shared by the mainstream vision toolchains, so exported-model comparisons
line up. All resampling runs in float64 and is pure numpy: no hidden
threading, bit-identical across runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError
from . import container


def load_image(path) -> np.ndarray:
    """Decode an image file to (H, W, 3) float32 in [0, 1].

    PNG/PPM/JPEG go through Pillow; a ``.lhtw`` file is treated as a raw
    container holding a single float tensor named ``image``.
    """
    path = Path(path)
    if path.suffix == ".lhtw":
        header, tensors = container.read_container(path)
        if "image" not in tensors:
            raise DataError(f"{path}: raw container lacks an 'image' tensor")
        img = np.asarray(tensors["image"], dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"{path}: image tensor must be H×W×3, got {img.shape}")
        return np.ascontiguousarray(img)
    try:
        from PIL import Image
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"image not found: {path}") from exc
    except Exception as exc:  # Pillow raises a zoo of decode errors
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr)


def save_raw_image(path, img: np.ndarray) -> None:
    container.write_container(path, {"image": np.asarray(img, dtype=np.float32)},
                              kind="raw")


def load_label_map(path) -> np.ndarray:
    """Ground-truth / prediction maps: single-channel integer images."""
    path = Path(path)
    if path.suffix == ".lhtw":
        _, tensors = container.read_container(path)
        if "labels" not in tensors:
            raise DataError(f"{path}: raw container lacks a 'labels' tensor")
        return np.asarray(tensors["labels"], dtype=np.int64)
    try:
        from PIL import Image
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                im = im.convert("L")
            arr = np.asarray(im)
    except FileNotFoundError as exc:
        raise DataError(f"label map not found: {path}") from exc
    except Exception as exc:
        raise DataError(f"cannot decode label map {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: label map must be single-channel, got {arr.shape}")
    return arr.astype(np.int64)


def save_label_map(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-d, got {labels.shape}")
    path = Path(path)
    if path.suffix == ".lhtw":
        container.write_container(path, {"labels": labels.astype(np.float32)},
                                  kind="raw")
        return
    from PIL import Image
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= 1 << 16:
        raise DataError("label values must fit in 16 bits for image output")
    if labels.max(initial=0) < 256:
        Image.fromarray(labels.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(labels.astype(np.uint16)).save(path)


# ---------------------------------------------------------------------------
# resampling


def _sample_coords(out_size: int, in_size: int) -> np.ndarray:
    scale = in_size / out_size
    return (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(H, W, C) or (H, W) → resized float64 array."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"expected H×W[×C], got {img.shape}")
    in_h, in_w, _ = img.shape
    ys = np.clip(_sample_coords(out_h, in_h), 0.0, in_h - 1.0)
    xs = np.clip(_sample_coords(out_w, in_w), 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def _cubic_kernel(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    # Keys kernel, the a=-0.75 flavor the common frameworks use.
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    out = np.where(t <= 1.0,
                   (a + 2) * t3 - (a + 3) * t2 + 1.0,
                   np.where(t < 2.0, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0))
    return out


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"expected H×W[×C], got {img.shape}")
    in_h, in_w, _ = img.shape

    def axis_weights(out_size, in_size):
        coords = _sample_coords(out_size, in_size)
        base = np.floor(coords).astype(np.int64)
        idx = base[:, None] + np.arange(-1, 3)[None, :]
        w = _cubic_kernel(coords[:, None] - idx)
        w /= w.sum(axis=1, keepdims=True)
        return np.clip(idx, 0, in_size - 1), w

    yi, wy = axis_weights(out_h, in_h)
    xi, wx = axis_weights(out_w, in_w)
    tmp = np.zeros((in_h, out_w, img.shape[2]), dtype=np.float64)
    for k in range(4):
        tmp += img[:, xi[:, k], :] * wx[:, k][None, :, None]
    out = np.zeros((out_h, out_w, img.shape[2]), dtype=np.float64)
    for k in range(4):
        out += tmp[yi[:, k], :, :] * wy[:, k][:, None, None]
    return out[:, :, 0] if squeeze else out


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"expected H×W labels, got {labels.shape}")
    in_h, in_w = labels.shape
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * in_h / out_h), 0, in_h - 1).astype(np.int64)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * in_w / out_w), 0, in_w - 1).astype(np.int64)
    return labels[ys][:, xs]


def resize_short_side(img: np.ndarray, target: int, *, mode: str = "bilinear") -> np.ndarray:
    h, w = img.shape[:2]
    if h <= w:
        out_h, out_w = target, max(1, int(w * target / h + 0.5))
    else:
        out_h, out_w = max(1, int(h * target / w + 0.5)), target
    fn = resize_bilinear if mode == "bilinear" else resize_bicubic
    return fn(img, out_h, out_w)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ShapeError(f"cannot center-crop {size} from {h}×{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top:top + size, left:left + size]


# ---------------------------------------------------------------------------
# pixel labels → patch labels


def patch_labels_from_pixels(gt: np.ndarray, patch: int, ignore_index: int,
                             num_classes: int | None = None) -> np.ndarray:
    """Majority vote over each patch's pixels; a patch whose majority is the
    ignore index becomes ignore. Ties resolve to the lowest class index."""
    gt = np.asarray(gt, dtype=np.int64)
    if gt.ndim != 2 or gt.shape[0] % patch or gt.shape[1] % patch:
        raise ShapeError(
            f"label map {gt.shape} not divisible into {patch}×{patch} patches")
    h, w = gt.shape[0] // patch, gt.shape[1] // patch
    blocks = gt.reshape(h, patch, w, patch).transpose(0, 2, 1, 3).reshape(h * w, patch * patch)
    out = np.empty(h * w, dtype=np.int64)
    for i, block in enumerate(blocks):
        vals, counts = np.unique(block, return_counts=True)
        winner = vals[np.argmax(counts)]  # np.unique sorts, so ties pick lowest
        out[i] = winner
    if num_classes is not None:
        bad = (out != ignore_index) & ((out < 0) | (out >= num_classes))
        if np.any(bad):
            raise DataError(
                f"patch labels outside [0,{num_classes}) and not ignore={ignore_index}")
    return out
