"""Writer (and verification reader) for the ``.lhtw`` tensor container.

The engine side owns the format; this module produces files it accepts:

    bytes 0..7    magic ``b"LHTW0001"``
    bytes 8..15   uint64 little-endian header length
    bytes 16..    minified JSON header (sorted keys), zero-padded so the
                  payload starts on a 64-byte boundary
    payload       little-endian float32 tensors, row-major, packed in
                  sorted-name order at the offsets the header declares
    last 4 bytes  uint32 little-endian CRC32 of the payload

Writes are a pure function of the inputs, so exporting the same
checkpoint twice yields byte-identical files.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import ExportError

MAGIC = b"LHTW0001"
FORMAT_VERSION = 1
ALIGN = 64


def write_container(path, tensors: dict[str, np.ndarray], *, kind: str,
                    config: dict | None = None,
                    class_names: list[str] | None = None,
                    meta: dict | None = None) -> None:
    if not tensors:
        raise ExportError("refusing to write a container with no tensors")
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise ExportError(f"tensor {name!r} contains non-finite values")
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
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_start = ((16 + len(encoded) + ALIGN - 1) // ALIGN) * ALIGN
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(encoded).to_bytes(8, "little"))
        f.write(encoded)
        f.write(b"\x00" * (payload_start - 16 - len(encoded)))
        payload = b"".join(blobs)
        f.write(payload)
        f.write(zlib.crc32(payload).to_bytes(4, "little"))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back a container for post-write verification. Checks magic,
    version, and the payload CRC; returns (header, tensors)."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise ExportError(f"{path}: not a .lhtw container")
    hlen = int.from_bytes(raw[8:16], "little")
    if 16 + hlen > len(raw):
        raise ExportError(f"{path}: truncated header")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ExportError(f"{path}: unsupported version {header.get('format_version')!r}")
    payload_start = ((16 + hlen + ALIGN - 1) // ALIGN) * ALIGN
    size = int(header["payload_size"])
    payload = raw[payload_start:payload_start + size]
    if len(payload) != size:
        raise ExportError(f"{path}: truncated payload")
    stored = int.from_bytes(raw[payload_start + size:payload_start + size + 4], "little")
    if zlib.crc32(payload) != stored:
        raise ExportError(f"{path}: payload checksum failure")
    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=int(entry["offset"]))
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return header, tensors
