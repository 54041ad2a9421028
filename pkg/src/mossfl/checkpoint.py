"""Binary checkpoint / logit wire format used for storage and traffic accounting.

Blob layout::

    b"MOSSCKPT"                 8 bytes magic
    uint32 LE format version    4 bytes
    uint32 LE name length       4 bytes
    name, UTF-8                 arch name, or "logits"
    float32 LE values           every tensor in manifest order, C order

The sidecar manifest is compact JSON::

    {"format": 1, "kind": "model"|"meta"|"logits", "name": ..., "tensors": [{"name", "shape"}]}

A payload's transmitted size is ``len(blob) + len(manifest)``, i.e.
``4 * n_values + 16 + len(name) + len(manifest)``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MOSSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _manifest(name: str, kind: str, tensors: Mapping[str, torch.Tensor]) -> bytes:
    doc = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "name": name,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    return json.dumps(doc, separators=(",", ":")).encode()


def encode(tensors: Mapping[str, torch.Tensor], name: str, kind: str = "model") -> tuple[bytes, bytes]:
    """Return ``(blob, manifest)`` for an ordered mapping of tensors."""
    raw_name = name.encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(raw_name)), raw_name]
    for t in tensors.values():
        parts.append(t.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts), _manifest(name, kind, tensors)


def decode(blob: bytes, manifest: bytes) -> tuple[str, "OrderedDict[str, torch.Tensor]"]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic")
    version, name_len = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    name = blob[16:16 + name_len].decode()
    doc = json.loads(manifest)
    offset = 16 + name_len
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for entry in doc["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * n
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return name, out


def payload_nbytes(tensors: Mapping[str, torch.Tensor], name: str, kind: str = "model") -> int:
    values = sum(int(t.numel()) for t in tensors.values())
    return 4 * values + 16 + len(name.encode()) + len(_manifest(name, kind, tensors))


def save(path: str | Path, tensors: Mapping[str, torch.Tensor], name: str, kind: str = "model") -> int:
    """Write ``path`` and ``path.json``; returns the total byte count."""
    path = Path(path)
    blob, manifest = encode(tensors, name, kind)
    path.write_bytes(blob)
    path.with_name(path.name + ".json").write_bytes(manifest)
    return len(blob) + len(manifest)


def load(path: str | Path) -> tuple[str, "OrderedDict[str, torch.Tensor]"]:
    path = Path(path)
    return decode(path.read_bytes(), path.with_name(path.name + ".json").read_bytes())
