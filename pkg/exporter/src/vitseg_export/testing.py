"""Self-contained tiny fixtures for offline tests.

``tiny_model`` builds a seeded random-init two-tower model small enough
to export and probe in well under a second; ``tiny_fixture`` materializes
the full artifact set (weights, text, probe, image) in a directory so
interop tests on the engine side can consume them without torch knowledge.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .probe import parity_probe
from .text import export_text
from .vision import export_vision

TINY_PROJECTION = 24


class ToyTokenizer:
    """Character-hash stand-in for the real BPE tokenizer.

    Deterministic and vocabulary-free: body characters map into low ids,
    bracketed by BOS/EOS so the model's EOS pooling finds the right row.
    Call convention matches the transformers tokenizers it replaces.
    """

    def __init__(self, context=16, bos=62, eos=63, pad=0):
        self.context = context
        self.bos = bos
        self.eos = eos
        self.pad = pad

    def __call__(self, texts, padding=True, return_tensors="pt"):
        import torch

        if return_tensors != "pt":
            raise ValueError("only return_tensors='pt' is supported")
        seqs = []
        for text in texts:
            body = [1 + (ord(c) % 60) for c in str(text).lower()]
            seqs.append([self.bos] + body[:self.context - 2] + [self.eos])
        width = max(len(s) for s in seqs)
        ids = [s + [self.pad] * (width - len(s)) for s in seqs]
        mask = [[1] * len(s) + [0] * (width - len(s)) for s in seqs]
        return {"input_ids": torch.tensor(ids),
                "attention_mask": torch.tensor(mask)}

    @classmethod
    def for_model(cls, model) -> "ToyTokenizer":
        cfg = model.text_model.config
        eos = int(cfg.eos_token_id)
        return cls(context=int(cfg.max_position_embeddings), bos=eos - 1,
                   eos=eos, pad=int(cfg.pad_token_id or 0))


def tiny_model(seed: int = 13):
    """Seeded random-init two-tower model (3 vision layers, width 64) and a
    matching toy tokenizer. Exact-erf gelu so engine parity is tight."""
    import torch
    from transformers import CLIPConfig, CLIPModel

    torch.manual_seed(seed)
    cfg = CLIPConfig(
        projection_dim=TINY_PROJECTION,
        vision_config=dict(hidden_size=64, intermediate_size=256,
                           num_hidden_layers=3, num_attention_heads=2,
                           patch_size=4, image_size=16, hidden_act="gelu"),
        text_config=dict(hidden_size=32, intermediate_size=128,
                         num_hidden_layers=2, num_attention_heads=2,
                         vocab_size=64, max_position_embeddings=16,
                         hidden_act="gelu", bos_token_id=62, eos_token_id=63,
                         pad_token_id=0),
    )
    return CLIPModel(cfg).eval(), ToyTokenizer()


TINY_CLASSES = ("left", "right")
TINY_TEMPLATES = ("a photo of a {}.", "a blurry photo of a {}.")


@dataclass(frozen=True)
class TinyFixture:
    root: Path
    weights: Path
    text: Path
    probe: Path
    image: Path                     # .npy, (16, 16, 3) float32 in [0, 1]
    model: object
    tokenizer: ToyTokenizer
    source: str

    def re_export_weights(self, path) -> None:
        export_vision(self.model, path, source=self.source)

    def re_export_text(self, path) -> None:
        export_text(self.model, self.tokenizer, list(TINY_CLASSES),
                    list(TINY_TEMPLATES), path, source=self.source)


def tiny_fixture(root, seed: int = 13) -> TinyFixture:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    model, tokenizer = tiny_model(seed)
    source = f"tiny-random-seed{seed}"

    image = np.random.default_rng(seed).random((16, 16, 3)).astype(np.float32)
    image_path = root / "image.npy"
    np.save(image_path, image)

    weights = root / "weights.lhtw"
    export_vision(model, weights, source=source)
    text = root / "text.lhtw"
    export_text(model, tokenizer, list(TINY_CLASSES), list(TINY_TEMPLATES),
                text, source=source)
    probe = root / "probe.lhtw"
    parity_probe(model, image, probe)
    return TinyFixture(root=root, weights=weights, text=text, probe=probe,
                       image=image_path, model=model, tokenizer=tokenizer,
                       source=source)
