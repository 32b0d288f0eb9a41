"""Tensor extraction from a torch CLIP checkpoint.

The engine multiplies token matrices on the right (`x @ W`), so every
linear weight leaves here transposed from the torch ``(out, in)`` layout.
It also consumes unit-range images with no preprocessing step, so the
pixel normalization is folded into the patch projection: the conv kernel
is scaled by 1/std per input channel and ``-mean/std`` is absorbed into
a projection bias (the checkpoint conv itself has none).
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ExportError

# normalization constants published with the original checkpoints
OPENAI_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
OPENAI_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


def vision_parts(model):
    """Split any of the CLIP wrappers into (vision tower, projection, prefix).

    Accepts a two-tower model, a vision model with projection head, or a
    bare vision tower (projection comes back None for the latter).
    """
    tower = getattr(model, "vision_model", model)
    proj = getattr(model, "visual_projection", None)
    if not hasattr(tower, "encoder") or not hasattr(tower, "pre_layrnorm"):
        raise ExportError("unknown architecture: no CLIP vision transformer found")
    prefix = "vision_model." if tower is not model else ""
    return tower, proj, prefix


def _leaf(module, attr, source, shape):
    param = getattr(module, attr, None)
    if param is None:
        raise ExportError(f"missing tensor {source}")
    arr = param.detach().cpu().numpy().astype(np.float32)
    if arr.shape != shape:
        raise ExportError(f"{source}: shape {tuple(arr.shape)}, expected {shape}")
    return arr


def extract_vision(model, image_mean=None, image_std=None,
                   ) -> tuple[dict, dict[str, np.ndarray], dict[str, dict]]:
    """Walk the vision tower into container tensors.

    Returns (config values, tensors, tensor map); the map records, for
    every container tensor, the one checkpoint tensor it came from and
    the transform applied.
    """
    tower, proj, prefix = vision_parts(model)
    if proj is None:
        raise ExportError("checkpoint has no visual projection head; "
                          "export needs the full two-tower model")
    cfg = tower.config
    if getattr(cfg, "num_channels", 3) != 3:
        raise ExportError(f"unknown architecture: {cfg.num_channels} input channels")
    d = cfg.hidden_size
    if cfg.intermediate_size != 4 * d:
        raise ExportError("unknown architecture: FFN width "
                          f"{cfg.intermediate_size} is not 4x hidden size {d}")
    if cfg.hidden_act != "gelu":
        warnings.warn(
            f"checkpoint activation {cfg.hidden_act!r} differs from the exact-erf "
            "gelu the engine computes; layer parity will be approximate",
            stacklevel=2)
    p = cfg.patch_size
    hw = (cfg.image_size // p) ** 2
    mean = np.asarray(OPENAI_IMAGE_MEAN if image_mean is None else image_mean,
                      dtype=np.float64)
    std = np.asarray(OPENAI_IMAGE_STD if image_std is None else image_std,
                     dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,) or np.any(std == 0.0):
        raise ExportError("image_mean/image_std must each carry 3 nonzero channel values")

    config = {
        "layers": int(cfg.num_hidden_layers),
        "heads": int(cfg.num_attention_heads),
        "width": int(d),
        "patch_size": int(p),
        "image_size": int(cfg.image_size),
        "ln_eps": float(cfg.layer_norm_eps),
        "projection_dim": int(proj.weight.shape[0]),
    }
    tensors: dict[str, np.ndarray] = {}
    tmap: dict[str, dict] = {}

    def take(name, module, attr, source, shape, transform="copy"):
        arr = _leaf(module, attr, prefix + source, shape)
        if transform == "transpose":
            arr = np.ascontiguousarray(arr.T)
        tensors[name] = arr
        tmap[name] = {"source": prefix + source, "transform": transform}

    emb = getattr(tower, "embeddings", None)
    if emb is None:
        raise ExportError("missing tensor embeddings")
    kernel = _leaf(emb.patch_embedding, "weight",
                   prefix + "embeddings.patch_embedding.weight", (d, 3, p, p))
    k64 = kernel.astype(np.float64)
    tensors["patch_proj"] = (k64 / std[None, :, None, None]) \
        .reshape(d, 3 * p * p).astype(np.float32)
    tmap["patch_proj"] = {
        "source": prefix + "embeddings.patch_embedding.weight",
        "transform": "kernel scaled by 1/std per channel, rows flattened (3,P,P)"}
    tensors["patch_bias"] = (-(k64 * (mean / std)[None, :, None, None])
                             .sum(axis=(1, 2, 3))).astype(np.float32)
    tmap["patch_bias"] = {
        "source": prefix + "embeddings.patch_embedding.weight",
        "transform": "folded pixel normalization: -sum(kernel * mean/std)"}

    take("class_token", emb, "class_embedding", "embeddings.class_embedding", (d,))
    take("pos_embed", emb.position_embedding, "weight",
         "embeddings.position_embedding.weight", (1 + hw, d))
    take("pre_norm_gain", tower.pre_layrnorm, "weight", "pre_layrnorm.weight", (d,))
    take("pre_norm_bias", tower.pre_layrnorm, "bias", "pre_layrnorm.bias", (d,))

    layers = list(tower.encoder.layers)
    if len(layers) != config["layers"]:
        raise ExportError(f"unknown architecture: {len(layers)} encoder layers, "
                          f"config declares {config['layers']}")
    for i, layer in enumerate(layers):
        src = f"encoder.layers.{i}."
        dst = f"layers.{i}."
        for tag, mod in (("q", layer.self_attn.q_proj), ("k", layer.self_attn.k_proj),
                         ("v", layer.self_attn.v_proj), ("o", layer.self_attn.out_proj)):
            torch_name = f"self_attn.{'out' if tag == 'o' else tag}_proj"
            take(dst + f"attn_{tag}_w", mod, "weight",
                 src + torch_name + ".weight", (d, d), "transpose")
            take(dst + f"attn_{tag}_b", mod, "bias", src + torch_name + ".bias", (d,))
        take(dst + "ffn_w1", layer.mlp.fc1, "weight",
             src + "mlp.fc1.weight", (4 * d, d), "transpose")
        take(dst + "ffn_b1", layer.mlp.fc1, "bias", src + "mlp.fc1.bias", (4 * d,))
        take(dst + "ffn_w2", layer.mlp.fc2, "weight",
             src + "mlp.fc2.weight", (d, 4 * d), "transpose")
        take(dst + "ffn_b2", layer.mlp.fc2, "bias", src + "mlp.fc2.bias", (d,))
        take(dst + "norm1_gain", layer.layer_norm1, "weight",
             src + "layer_norm1.weight", (d,))
        take(dst + "norm1_bias", layer.layer_norm1, "bias",
             src + "layer_norm1.bias", (d,))
        take(dst + "norm2_gain", layer.layer_norm2, "weight",
             src + "layer_norm2.weight", (d,))
        take(dst + "norm2_bias", layer.layer_norm2, "bias",
             src + "layer_norm2.bias", (d,))

    take("final_norm_gain", tower.post_layernorm, "weight",
         "post_layernorm.weight", (d,))
    take("final_norm_bias", tower.post_layernorm, "bias",
         "post_layernorm.bias", (d,))
    proj_w = _leaf(proj, "weight", "visual_projection.weight",
                   (config["projection_dim"], d))
    tensors["visual_proj"] = np.ascontiguousarray(proj_w.T)
    tmap["visual_proj"] = {"source": "visual_projection.weight",
                           "transform": "transpose"}
    return config, tensors, tmap
