"""The ``.lhtw`` binary tensor container and the weight/text loaders.

Layout (all integers little-endian):

    bytes 0..7    magic ``b"LHTW0001"``
    bytes 8..15   uint64 header length in bytes
    bytes 16..    UTF-8 JSON header, zero-padded so the payload starts on
                  a 64-byte boundary
    payload       raw little-endian float32 tensor data, row-major,
                  at the offsets declared in the header
    last 4 bytes  uint32 CRC32 of the payload region

Header schema::

    {
      "format_version": 1,
      "kind": "vit_weights" | "text_embeddings" | "raw",
      "config": {...},            # vit_weights only
      "class_names": [...],       # text_embeddings only
      "tensors": {name: {"dtype": "f32", "shape": [...], "offset": int}},
      "payload_size": int,
      "meta": {...}               # free-form provenance
    }

Offsets are relative to the payload start. Weights are immutable after
load: every returned array has ``writeable`` cleared.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"LHTW0001"
FORMAT_VERSION = 1
_ALIGN = 64


# ---------------------------------------------------------------------------
# generic read / write


def write_container(path, tensors: dict[str, np.ndarray], *, kind: str,
                    config: dict | None = None,
                    class_names: list[str] | None = None,
                    meta: dict | None = None) -> None:
    """Serialize ``tensors`` deterministically (sorted names, packed payload)."""
    names = sorted(tensors)
    entries = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tensors": entries,
        "payload_size": offset,
    }
    if config is not None:
        header["config"] = config
    if class_names is not None:
        header["class_names"] = list(class_names)
    if meta is not None:
        header["meta"] = meta
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_start = ((16 + len(hjson) + _ALIGN - 1) // _ALIGN) * _ALIGN
    payload = b"".join(blobs)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hjson).to_bytes(8, "little"))
        f.write(hjson)
        f.write(b"\x00" * (payload_start - 16 - len(hjson)))
        f.write(payload)
        f.write(zlib.crc32(payload).to_bytes(4, "little"))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse, checksum-verify, and return (header, tensors)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read container {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a .lhtw container (bad magic)")
    hlen = int.from_bytes(raw[8:16], "little")
    if 16 + hlen > len(raw):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: malformed header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: unsupported container version {header.get('format_version')!r}")
    payload_start = ((16 + hlen + _ALIGN - 1) // _ALIGN) * _ALIGN
    payload_size = int(header.get("payload_size", -1))
    end = payload_start + payload_size
    if payload_size < 0 or end + 4 > len(raw):
        raise ContainerError(f"{path}: truncated payload")
    payload = raw[payload_start:end]
    stored_crc = int.from_bytes(raw[end:end + 4], "little")
    if zlib.crc32(payload) != stored_crc:
        raise ContainerError(f"{path}: payload checksum failure")
    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        if entry.get("dtype") != "f32":
            raise ContainerError(f"{path}: tensor {name!r} has unsupported dtype")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(entry["offset"])
        if off < 0 or off + 4 * count > payload_size:
            raise ContainerError(f"{path}: tensor {name!r} extends past payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        arr = arr.reshape(shape).astype(np.float32)  # copy; native byte order
        arr.flags.writeable = False
        tensors[name] = arr
    return header, tensors


def payload_crc(path) -> str:
    """Hex CRC32 of a container's payload (recorded in run manifests)."""
    header, _ = read_container(path)
    raw = Path(path).read_bytes()
    hlen = int.from_bytes(raw[8:16], "little")
    payload_start = ((16 + hlen + _ALIGN - 1) // _ALIGN) * _ALIGN
    end = payload_start + int(header["payload_size"])
    return f"{zlib.crc32(raw[payload_start:end]):08x}"


# ---------------------------------------------------------------------------
# typed weight set


@dataclass(frozen=True)
class VitConfig:
    layers: int
    heads: int
    width: int
    patch_size: int
    image_size: int
    ln_eps: float
    projection_dim: int

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ContainerError(
                f"width {self.width} not divisible by heads {self.heads}")
        if self.layers < 3:
            raise ContainerError(
                f"need at least 3 layers (final/penultimate/earlier), got {self.layers}")
        if self.image_size % self.patch_size != 0:
            raise ContainerError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def native_grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    norm1_gain: np.ndarray
    norm1_bias: np.ndarray
    norm2_gain: np.ndarray
    norm2_bias: np.ndarray


@dataclass(frozen=True)
class VitWeights:
    config: VitConfig
    patch_proj: np.ndarray          # (D, 3*P*P)
    patch_bias: np.ndarray          # (D,)
    class_token: np.ndarray         # (D,)
    pos_embed: np.ndarray           # (1 + native_hw, D)
    layers: tuple[LayerWeights, ...]
    final_norm_gain: np.ndarray
    final_norm_bias: np.ndarray
    visual_proj: np.ndarray         # (D, projection_dim)
    pre_norm: tuple[np.ndarray, np.ndarray] | None = None  # embedding-stage LN
    checksum: str = ""


@dataclass(frozen=True)
class TextEmbeddings:
    class_names: tuple[str, ...]
    matrix: np.ndarray              # (C, projection_dim), rows unit-norm

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


_LAYER_TENSORS = (
    ("attn_q_w", "w_q"), ("attn_q_b", "b_q"),
    ("attn_k_w", "w_k"), ("attn_k_b", "b_k"),
    ("attn_v_w", "w_v"), ("attn_v_b", "b_v"),
    ("attn_o_w", "w_o"), ("attn_o_b", "b_o"),
    ("ffn_w1", "ffn_w1"), ("ffn_b1", "ffn_b1"),
    ("ffn_w2", "ffn_w2"), ("ffn_b2", "ffn_b2"),
    ("norm1_gain", "norm1_gain"), ("norm1_bias", "norm1_bias"),
    ("norm2_gain", "norm2_gain"), ("norm2_bias", "norm2_bias"),
)


def expected_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    """Every mandatory tensor name with its shape, per the config arithmetic."""
    d = cfg.width
    f = 4 * d
    hw = (cfg.image_size // cfg.patch_size) ** 2
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj": (d, 3 * cfg.patch_size * cfg.patch_size),
        "patch_bias": (d,),
        "class_token": (d,),
        "pos_embed": (1 + hw, d),
        "final_norm_gain": (d,),
        "final_norm_bias": (d,),
        "visual_proj": (d, cfg.projection_dim),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "attn_q_w"] = (d, d)
        shapes[p + "attn_q_b"] = (d,)
        shapes[p + "attn_k_w"] = (d, d)
        shapes[p + "attn_k_b"] = (d,)
        shapes[p + "attn_v_w"] = (d, d)
        shapes[p + "attn_v_b"] = (d,)
        shapes[p + "attn_o_w"] = (d, d)
        shapes[p + "attn_o_b"] = (d,)
        shapes[p + "ffn_w1"] = (d, f)
        shapes[p + "ffn_b1"] = (f,)
        shapes[p + "ffn_w2"] = (f, d)
        shapes[p + "ffn_b2"] = (d,)
        shapes[p + "norm1_gain"] = (d,)
        shapes[p + "norm1_bias"] = (d,)
        shapes[p + "norm2_gain"] = (d,)
        shapes[p + "norm2_bias"] = (d,)
    return shapes


def load_weights(path) -> VitWeights:
    """Load and validate a vit_weights container."""
    header, tensors = read_container(path)
    if header.get("kind") != "vit_weights":
        raise ContainerError(f"{path}: kind {header.get('kind')!r}, expected 'vit_weights'")
    cfg_dict = header.get("config")
    if not isinstance(cfg_dict, dict):
        raise ContainerError(f"{path}: missing config block")
    try:
        cfg = VitConfig(
            layers=int(cfg_dict["layers"]),
            heads=int(cfg_dict["heads"]),
            width=int(cfg_dict["width"]),
            patch_size=int(cfg_dict["patch_size"]),
            image_size=int(cfg_dict["image_size"]),
            ln_eps=float(cfg_dict["ln_eps"]),
            projection_dim=int(cfg_dict["projection_dim"]),
        )
    except KeyError as exc:
        raise ContainerError(f"{path}: config missing field {exc}") from exc

    shapes = expected_shapes(cfg)
    for name, shape in shapes.items():
        if name not in tensors:
            raise ContainerError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise ContainerError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        if not np.all(np.isfinite(tensors[name])):
            raise ContainerError(f"{path}: tensor {name!r} contains non-finite values")

    pre_norm = None
    if "pre_norm_gain" in tensors or "pre_norm_bias" in tensors:
        for name in ("pre_norm_gain", "pre_norm_bias"):
            if name not in tensors:
                raise ContainerError(f"{path}: missing tensor {name!r}")
            if tensors[name].shape != (cfg.width,):
                raise ContainerError(f"{path}: tensor {name!r} has wrong shape")
        pre_norm = (tensors["pre_norm_gain"], tensors["pre_norm_bias"])

    layers = tuple(
        LayerWeights(**{attr: tensors[f"layers.{i}.{tname}"]
                        for tname, attr in _LAYER_TENSORS})
        for i in range(cfg.layers)
    )
    return VitWeights(
        config=cfg,
        patch_proj=tensors["patch_proj"],
        patch_bias=tensors["patch_bias"],
        class_token=tensors["class_token"],
        pos_embed=tensors["pos_embed"],
        layers=layers,
        final_norm_gain=tensors["final_norm_gain"],
        final_norm_bias=tensors["final_norm_bias"],
        visual_proj=tensors["visual_proj"],
        pre_norm=pre_norm,
        checksum=payload_crc(path),
    )


def load_text_embeddings(path, projection_dim: int | None = None) -> TextEmbeddings:
    """Load a text_embeddings container; rows are re-normalized on load."""
    header, tensors = read_container(path)
    if header.get("kind") != "text_embeddings":
        raise ContainerError(f"{path}: kind {header.get('kind')!r}, expected 'text_embeddings'")
    if "text_embeddings" not in tensors:
        raise ContainerError(f"{path}: missing tensor 'text_embeddings'")
    matrix = tensors["text_embeddings"]
    names = header.get("class_names")
    if not isinstance(names, list) or not names:
        raise ContainerError(f"{path}: missing class_names")
    if matrix.ndim != 2 or matrix.shape[0] != len(names):
        raise ContainerError(
            f"{path}: text matrix shape {matrix.shape} inconsistent with {len(names)} classes")
    if projection_dim is not None and matrix.shape[1] != projection_dim:
        raise ContainerError(
            f"{path}: embedding dim {matrix.shape[1]} != projection_dim {projection_dim}")
    norms = np.sqrt((matrix.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        raise ContainerError(f"{path}: zero-norm text embedding row")
    matrix = (matrix.astype(np.float64) / norms[:, None]).astype(np.float32)
    matrix.flags.writeable = False
    return TextEmbeddings(class_names=tuple(str(n) for n in names), matrix=matrix)


# ---------------------------------------------------------------------------
# toy-model construction (tests, fixtures, demos)


def random_weight_tensors(cfg: VitConfig, seed: int = 0, scale: float = 0.05,
                          with_pre_norm: bool = False) -> dict[str, np.ndarray]:
    """Gaussian random tensors for every slot of ``cfg`` (toy models)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_gain"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif leaf.endswith(("_bias", "_b")) or leaf in ("ffn_b1", "ffn_b2"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, scale, size=shape).astype(np.float32)
    if with_pre_norm:
        tensors["pre_norm_gain"] = np.ones(cfg.width, dtype=np.float32)
        tensors["pre_norm_bias"] = np.zeros(cfg.width, dtype=np.float32)
    return tensors


def config_dict(cfg: VitConfig) -> dict:
    return {
        "layers": cfg.layers, "heads": cfg.heads, "width": cfg.width,
        "patch_size": cfg.patch_size, "image_size": cfg.image_size,
        "ln_eps": cfg.ln_eps, "projection_dim": cfg.projection_dim,
    }


def weights_from_tensors(cfg: VitConfig, tensors: dict[str, np.ndarray]) -> VitWeights:
    """Build an in-memory VitWeights without touching disk (round-trips gladly)."""
    import tempfile, os
    fd, tmp = tempfile.mkstemp(suffix=".lhtw")
    os.close(fd)
    try:
        write_container(tmp, tensors, kind="vit_weights", config=config_dict(cfg))
        return load_weights(tmp)
    finally:
        os.unlink(tmp)
