"""Vision-tower export: checkpoint → engine weight container."""

from __future__ import annotations

from dataclasses import dataclass, field

from .container import read_container, write_container
from .convert import OPENAI_IMAGE_MEAN, OPENAI_IMAGE_STD, extract_vision
from .errors import ExportError


@dataclass(frozen=True)
class ExportManifest:
    """Provenance record written into the container's meta block.

    ``tensor_map`` ties every container tensor to exactly one checkpoint
    tensor with the transform applied; text exports fill ``templates``,
    ``class_names``, and ``checksum`` instead.
    """

    source: str
    config: dict
    tensor_map: dict[str, dict]
    templates: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()
    checksum: str = ""
    image_mean: tuple[float, ...] = ()
    image_std: tuple[float, ...] = ()

    def as_meta(self) -> dict:
        meta = {"source": self.source, "tensor_map": self.tensor_map}
        if self.config:
            meta["config"] = self.config
        if self.templates:
            meta["templates"] = list(self.templates)
        if self.class_names:
            meta["class_names"] = list(self.class_names)
        if self.checksum:
            meta["checksum"] = self.checksum
        if self.image_mean:
            meta["image_mean"] = list(self.image_mean)
            meta["image_std"] = list(self.image_std)
        return meta


def export_vision(model, out_path, *, source: str = "checkpoint",
                  image_mean=None, image_std=None) -> ExportManifest:
    """Convert a CLIP model's vision tower into a ``vit_weights`` container.

    The written file is verified by reading it back: every tensor must
    round-trip bitwise and match the declared config arithmetic.
    """
    mean = tuple(OPENAI_IMAGE_MEAN if image_mean is None else image_mean)
    std = tuple(OPENAI_IMAGE_STD if image_std is None else image_std)
    config, tensors, tmap = extract_vision(model, mean, std)
    manifest = ExportManifest(source=source, config=config, tensor_map=tmap,
                              image_mean=mean, image_std=std)
    write_container(out_path, tensors, kind="vit_weights", config=config,
                    meta=manifest.as_meta())
    _, back = read_container(out_path)
    if set(back) != set(tensors):
        raise ExportError(f"{out_path}: post-write verification lost tensors")
    for name, arr in tensors.items():
        if back[name].shape != arr.shape or not (back[name] == arr).all():
            raise ExportError(f"{out_path}: tensor {name!r} did not round-trip")
    return manifest
