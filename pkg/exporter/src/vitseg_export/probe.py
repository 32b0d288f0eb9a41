"""Reference activations for cross-implementation parity checks.

Runs the checkpoint's own framework on one fixed test image and writes
every stage the engine is expected to reproduce: the embedding output
(``layer_00``, after the embedding-stage norm), each encoder layer's
token matrix, and the dense projected features. The framework only
projects the pooled [CLS] token on its own, so the dense final stage
(full-sequence final norm + projection) is computed here explicitly.
"""

from __future__ import annotations

import numpy as np

from .container import write_container
from .convert import OPENAI_IMAGE_MEAN, OPENAI_IMAGE_STD, vision_parts
from .errors import ExportError


def parity_probe(model, image, out_path, *, image_mean=None,
                 image_std=None) -> dict:
    """Write per-stage reference activations for ``image`` (H, W, 3 floats
    in [0, 1], at the tower's native resolution). Returns the header meta."""
    import torch

    tower, proj, _ = vision_parts(model)
    cfg = tower.config
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ExportError(f"probe image must be H×W×3, got {arr.shape}")
    native = cfg.image_size
    if arr.shape[0] != native or arr.shape[1] != native:
        raise ExportError(f"probe image is {arr.shape[0]}×{arr.shape[1]}; "
                          f"this tower runs at {native}×{native}")
    mean = np.asarray(OPENAI_IMAGE_MEAN if image_mean is None else image_mean,
                      dtype=np.float64)
    std = np.asarray(OPENAI_IMAGE_STD if image_std is None else image_std,
                     dtype=np.float64)
    pixels = ((arr.astype(np.float64) - mean) / std).astype(np.float32)
    batch = torch.from_numpy(pixels.transpose(2, 0, 1)[None, :])

    tower.eval()
    with torch.no_grad():
        out = tower(pixel_values=batch, output_hidden_states=True)
        hidden = out.hidden_states
        tensors = {f"layer_{i:02d}": h[0].detach().cpu().numpy().astype(np.float32)
                   for i, h in enumerate(hidden)}
        if proj is not None:
            dense = proj(tower.post_layernorm(hidden[-1]))
            tensors["projected"] = dense[0].detach().cpu().numpy().astype(np.float32)

    meta = {
        "stages": sorted(tensors),
        "ln_eps": float(cfg.layer_norm_eps),
        "hidden_act": str(cfg.hidden_act),
        "image_size": int(native),
        "image_mean": mean.tolist(),
        "image_std": std.tolist(),
    }
    write_container(out_path, tensors, kind="raw", meta=meta)
    return meta
