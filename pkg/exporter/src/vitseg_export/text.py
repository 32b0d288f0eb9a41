"""Text-embedding export: class names × prompt templates → text container.

Per class, each templated prompt is embedded and L2-normalized, the
normalized embeddings are averaged, and the average is renormalized;
that ordering follows the published zero-shot ensembling recipe and is
recorded in the manifest. The matrix is computed twice through different
batching paths and cross-checked before anything is written.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .container import write_container
from .errors import ExportError
from .vision import ExportManifest


def _text_features(model, encoded):
    # return conventions vary by wrapper and library version: a bare tensor,
    # .text_embeds, or an output whose pooler_output carries the projection
    import torch

    with torch.no_grad():
        if hasattr(model, "get_text_features"):
            out = model.get_text_features(input_ids=encoded["input_ids"],
                                          attention_mask=encoded["attention_mask"])
        else:
            out = model(input_ids=encoded["input_ids"],
                        attention_mask=encoded["attention_mask"])
    if torch.is_tensor(out):
        return out
    for attr in ("text_embeds", "pooler_output"):
        feats = getattr(out, attr, None)
        if feats is not None:
            return feats
    raise ExportError("model output carries no projected text features")


def _class_row(model, tokenizer, prompts: list[str], one_at_a_time: bool) -> np.ndarray:
    if one_at_a_time:
        feats = [_text_features(model, tokenizer([p], padding=True,
                                                 return_tensors="pt"))
                 for p in prompts]
        import torch
        mat = torch.cat(feats, dim=0).detach().cpu().numpy().astype(np.float64)
    else:
        encoded = tokenizer(prompts, padding=True, return_tensors="pt")
        mat = _text_features(model, encoded).detach().cpu().numpy().astype(np.float64)
    norms = np.sqrt((mat * mat).sum(axis=1))
    if np.any(norms == 0.0):
        raise ExportError("zero-norm prompt embedding")
    mat /= norms[:, None]
    mean = mat.mean(axis=0)
    n = np.sqrt((mean * mean).sum())
    if n == 0.0:
        raise ExportError("prompt embeddings cancelled to a zero class vector")
    return mean / n


def export_text(model, tokenizer, class_names, templates, out_path, *,
                source: str = "checkpoint") -> ExportManifest:
    names = [str(n) for n in class_names]
    if not names:
        raise ExportError("class list is empty")
    for name in names:
        if not name.strip():
            raise ExportError("empty class name")
    temps = [str(t) for t in templates]
    if not temps:
        raise ExportError("template list is empty")
    for t in temps:
        if "{}" not in t:
            raise ExportError(f"template {t!r} has no {{}} slot for the class name")

    rows = np.stack([_class_row(model, tokenizer, [t.format(n) for t in temps],
                                one_at_a_time=False) for n in names])
    again = np.stack([_class_row(model, tokenizer, [t.format(n) for t in temps],
                                 one_at_a_time=True) for n in names])
    drift = float(np.max(np.abs(rows - again)))
    if drift > 1e-5:
        raise ExportError(f"embedding recomputation drifted by {drift:.2e}; "
                          "refusing to write an unstable matrix")
    matrix = rows.astype(np.float32)
    manifest = ExportManifest(
        source=source, config={},
        tensor_map={"text_embeddings": {
            "source": "text_model + text_projection",
            "transform": "per prompt: embed, L2-normalize; then average, renormalize"}},
        templates=tuple(temps), class_names=tuple(names),
        checksum=hashlib.sha256(matrix.tobytes()).hexdigest())
    write_container(out_path, {"text_embeddings": matrix}, kind="text_embeddings",
                    class_names=names, meta=manifest.as_meta())
    return manifest
