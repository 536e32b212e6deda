"""Single-file checkpoint container.

Layout::

    b"DAH1"                      magic
    uint32 little-endian         manifest byte length
    manifest                     canonical JSON, utf-8
    payload                      concatenated raw little-endian float32 buffers

The manifest maps each parameter name to its shape, byte offset into the
payload, and partition tag, and carries an opaque ``meta`` dict (backbone
config, schedule, normalization stats, provenance) plus the payload's
sha256. Offsets are assigned in sorted-name order, so the bytes produced for
given contents are unique: load followed by save reproduces the input file
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DAH1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a file is not a well-formed checkpoint."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    partitions: dict[str, str]
    meta: dict = field(default_factory=dict)

    def param_count(self, partition: str | None = None) -> int:
        return sum(
            a.size
            for name, a in self.params.items()
            if partition is None or self.partitions[name] == partition
        )


def checkpoint_bytes(arrays: dict[str, tuple[np.ndarray, str]], meta: dict) -> bytes:
    """Serialize name -> (array, partition) plus metadata."""
    names = sorted(arrays)
    payload_parts = []
    entries = {}
    offset = 0
    for name in names:
        arr, partition = arrays[name]
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "offset": offset,
            "partition": partition,
        }
        payload_parts.append(buf)
        offset += len(buf)
    payload = b"".join(payload_parts)
    manifest = _canonical_json(
        {
            "format_version": FORMAT_VERSION,
            "meta": meta,
            "params": entries,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
    )
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + payload


def save_checkpoint(path, arrays: dict[str, tuple[np.ndarray, str]], meta: dict) -> str:
    """Write the container; returns the sha256 of the file bytes."""
    blob = checkpoint_bytes(arrays, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + mlen:
        raise FormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(blob[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')}")
    payload = blob[8 + mlen :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest.get("payload_sha256"):
        raise FormatError("checkpoint payload hash mismatch (corrupt file)")
    params: dict[str, np.ndarray] = {}
    partitions: dict[str, str] = {}
    for name, entry in manifest["params"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        lo = entry["offset"]
        hi = lo + 4 * n
        if hi > len(payload):
            raise FormatError(f"checkpoint payload too short for parameter {name!r}")
        params[name] = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(shape).copy()
        partitions[name] = entry["partition"]
    return Checkpoint(params=params, partitions=partitions, meta=manifest.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"checkpoint not found: {p}")
    return checkpoint_from_bytes(p.read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
