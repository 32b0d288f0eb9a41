"""Checkpoint exporter for the segmentation engine's weight containers."""

from .errors import ExportError
from .probe import parity_probe
from .prompts import IMAGENET_TEMPLATES, TEMPLATE_SETS
from .text import export_text
from .vision import ExportManifest, export_vision

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportManifest",
    "IMAGENET_TEMPLATES",
    "TEMPLATE_SETS",
    "export_text",
    "export_vision",
    "parity_probe",
    "__version__",
]
