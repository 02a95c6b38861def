"""Single-file checkpoint container: JSON header plus raw float64 tensors.

Layout: 8-byte magic, little-endian uint64 header length, canonical JSON
header (sorted keys, no extraneous whitespace), then tensor bytes in
(group, name) order. The header carries names, shapes, offsets, per-group
content hashes, the vocabulary, and a config snapshot. Canonical ordering
makes load-then-save byte-identical, and the group hashes are what the
freeze audit compares across a training run.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "group_hash"]

_MAGIC = b"MORACKPT"
_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def group_hash(arrays: dict[str, np.ndarray]) -> str:
    """Content hash of a parameter group (names, shapes, and bytes)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """In-memory checkpoint: raw arrays per group plus metadata."""

    config: dict
    vocab: dict
    mode: str  # "dynamic" or "static"
    groups: dict[str, dict[str, np.ndarray]]
    extra: dict = field(default_factory=dict)

    def hashes(self) -> dict[str, str]:
        return {g: group_hash(arrs) for g, arrs in sorted(self.groups.items())}

    def save(self, path: str) -> None:
        order = []
        blobs = []
        offset = 0
        tensor_meta: dict[str, dict] = {}
        for gname in sorted(self.groups):
            tensor_meta[gname] = {"hash": group_hash(self.groups[gname]), "tensors": {}}
            for tname in sorted(self.groups[gname]):
                arr = np.ascontiguousarray(self.groups[gname][tname], dtype=np.float64)
                if not arr.dtype.isnative:  # keep the container fixed-endianness
                    arr = arr.astype("<f8")
                blob = arr.astype("<f8", copy=False).tobytes()
                tensor_meta[gname]["tensors"][tname] = {
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(blob),
                }
                order.append((gname, tname))
                blobs.append(blob)
                offset += len(blob)
        header = {
            "version": _VERSION,
            "mode": self.mode,
            "config": self.config,
            "vocab": self.vocab,
            "extra": self.extra,
            "groups": tensor_meta,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
            (head_len,) = struct.unpack("<Q", fh.read(8))
            try:
                header = json.loads(fh.read(head_len).decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as err:
                raise CheckpointError(f"corrupt header in {path}: {err}") from None
            if header.get("version") != _VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {header.get('version')}"
                )
            body = fh.read()
        groups: dict[str, dict[str, np.ndarray]] = {}
        for gname, gmeta in header["groups"].items():
            arrays = {}
            for tname, meta in gmeta["tensors"].items():
                start, nbytes = meta["offset"], meta["nbytes"]
                arr = np.frombuffer(body[start : start + nbytes], dtype="<f8")
                arrays[tname] = arr.reshape(meta["shape"]).astype(np.float64)
            if group_hash(arrays) != gmeta["hash"]:
                raise CheckpointError(f"group {gname!r} hash mismatch in {path}")
            groups[gname] = arrays
        return cls(
            config=header["config"],
            vocab=header["vocab"],
            mode=header["mode"],
            groups=groups,
            extra=header.get("extra", {}),
        )
