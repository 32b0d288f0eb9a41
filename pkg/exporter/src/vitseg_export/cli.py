"""Command-line exporter: ``export``, ``export-text``, and ``probe``.

Checkpoints resolve in three ways: ``--checkpoint`` points at a local
directory or hub id, ``--model`` names a published architecture to pull
from the hub, and ``--model X --random-init --seed N`` builds seeded
random weights at that architecture for offline smoke runs.
"""

from __future__ import annotations

from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import ExportError
from .probe import parity_probe
from .prompts import TEMPLATE_SETS
from .testing import ToyTokenizer
from .text import export_text
from .vision import export_vision

MODEL_IDS = {
    "vitb16": "openai/clip-vit-base-patch16",
    "vitl14": "openai/clip-vit-large-patch14",
}

# published architecture constants; gelu here is the exact-erf form the
# engine computes, which is what random-init weights should pair with
ARCHITECTURES = {
    "vitb16": dict(
        projection_dim=512,
        vision_config=dict(hidden_size=768, intermediate_size=3072,
                           num_hidden_layers=12, num_attention_heads=12,
                           patch_size=16, image_size=224, hidden_act="gelu"),
        text_config=dict(hidden_size=512, intermediate_size=2048,
                         num_hidden_layers=12, num_attention_heads=8,
                         hidden_act="gelu"),
    ),
    "vitl14": dict(
        projection_dim=768,
        vision_config=dict(hidden_size=1024, intermediate_size=4096,
                           num_hidden_layers=24, num_attention_heads=16,
                           patch_size=14, image_size=224, hidden_act="gelu"),
        text_config=dict(hidden_size=768, intermediate_size=3072,
                         num_hidden_layers=12, num_attention_heads=12,
                         hidden_act="gelu"),
    ),
}

_model_options = [
    click.option("--model", "model_name", type=click.Choice(sorted(MODEL_IDS)),
                 default=None, help="published architecture to load or build"),
    click.option("--checkpoint", default=None,
                 help="local directory or hub id (overrides --model)"),
    click.option("--random-init", is_flag=True,
                 help="seeded random weights at the --model architecture"),
    click.option("--seed", default=0, show_default=True,
                 help="seed for --random-init"),
]


def with_model_options(fn):
    for option in reversed(_model_options):
        fn = option(fn)
    return fn


def load_model(model_name, checkpoint, random_init, seed):
    """Returns (model, source identifier)."""
    from transformers import CLIPModel

    if checkpoint:
        try:
            return CLIPModel.from_pretrained(checkpoint).eval(), str(checkpoint)
        except Exception as exc:
            raise click.ClickException(f"cannot load checkpoint {checkpoint}: {exc}")
    if model_name is None:
        raise click.ClickException("pass --model or --checkpoint")
    if random_init:
        import torch
        from transformers import CLIPConfig

        torch.manual_seed(seed)
        model = CLIPModel(CLIPConfig(**ARCHITECTURES[model_name])).eval()
        return model, f"{model_name}-random-seed{seed}"
    hub_id = MODEL_IDS[model_name]
    try:
        return CLIPModel.from_pretrained(hub_id).eval(), hub_id
    except Exception as exc:
        raise click.ClickException(f"cannot load {hub_id}: {exc}")


@click.group()
@click.version_option(version=__version__, prog_name="vitseg-export")
def main():
    """Convert CLIP checkpoints into engine weight and text containers."""


@main.command()
@with_model_options
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="output .lhtw weight container")
def export(model_name, checkpoint, random_init, seed, out):
    """Export the vision tower to a weight container."""
    model, source = load_model(model_name, checkpoint, random_init, seed)
    try:
        manifest = export_vision(model, out, source=source)
    except ExportError as exc:
        raise click.ClickException(str(exc))
    c = manifest.config
    click.echo(f"wrote {len(manifest.tensor_map)} tensors "
               f"(L={c['layers']} H={c['heads']} D={c['width']} "
               f"P={c['patch_size']} proj={c['projection_dim']}) to {out}")


def _read_lines(path, what):
    try:
        raw = Path(path).read_text().splitlines()
    except OSError as exc:
        raise click.ClickException(f"cannot read {what} file {path}: {exc}")
    lines = [ln.strip() for ln in raw]
    return [ln for ln in lines if ln and not ln.startswith("#")]


@main.command("export-text")
@with_model_options
@click.option("--classes", "classes_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="class list, one name per line")
@click.option("--templates", "templates_arg", default="imagenet",
              show_default=True,
              help="named template set or a file of templates")
@click.option("--tokenizer", "tokenizer_kind",
              type=click.Choice(["auto", "toy"]), default="auto",
              show_default=True,
              help="'auto' loads the checkpoint's tokenizer; 'toy' is the "
                   "deterministic offline stand-in")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="output .lhtw text container")
def export_text_cmd(model_name, checkpoint, random_init, seed, classes_path,
                    templates_arg, tokenizer_kind, out):
    """Precompute prompt-averaged class embeddings."""
    model, source = load_model(model_name, checkpoint, random_init, seed)
    class_names = _read_lines(classes_path, "class list")
    if templates_arg in TEMPLATE_SETS:
        templates = list(TEMPLATE_SETS[templates_arg])
    elif Path(templates_arg).is_file():
        templates = _read_lines(templates_arg, "template")
    else:
        known = ", ".join(sorted(TEMPLATE_SETS))
        raise click.ClickException(
            f"--templates {templates_arg!r} is neither a known set ({known}) "
            "nor a readable file")
    if tokenizer_kind == "toy" or random_init:
        tokenizer = ToyTokenizer.for_model(model)
    else:
        from transformers import AutoTokenizer

        ref = checkpoint or MODEL_IDS[model_name]
        try:
            tokenizer = AutoTokenizer.from_pretrained(ref)
        except Exception as exc:
            raise click.ClickException(f"cannot load tokenizer from {ref}: {exc}")
    try:
        manifest = export_text(model, tokenizer, class_names, templates, out,
                               source=source)
    except ExportError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {len(manifest.class_names)} class embeddings "
               f"({len(manifest.templates)} templates, "
               f"sha256 {manifest.checksum[:12]}…) to {out}")


@main.command()
@with_model_options
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="test image: png/jpg (scaled to [0,1]) or a float .npy")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="output .lhtw reference-activation container")
def probe(model_name, checkpoint, random_init, seed, image_path, out):
    """Emit per-layer reference activations for one image."""
    model, _ = load_model(model_name, checkpoint, random_init, seed)
    if image_path.endswith(".npy"):
        image = np.load(image_path)
    else:
        from PIL import Image

        with Image.open(image_path) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    try:
        meta = parity_probe(model, image, out)
    except ExportError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {len(meta['stages'])} stages to {out}")
