"""Dataset container: conditioning windows paired with action chunks.

One binary format serves both data sources:

- kind ``jp``: conditioning rows are joint configurations (observation-free
  pretraining pairs)
- kind ``obs``: conditioning rows are environment observations (demo windows)

Layout::

    b"OFD1"
    uint16  version
    uint8   kind (0 = jp, 1 = obs)
    uint8   reserved
    uint32  n_samples, n_obs, cond_dim, horizon, action_dim
    uint64  seed
    NormStats block: cond_min, cond_max (cond_dim f4 each);
                     act_min, act_max (action_dim f4 each)
    samples: per sample, the (n_obs, cond_dim) conditioning window then the
             (horizon, action_dim) action chunk, packed little-endian f4

Values are stored raw; normalization stats travel with the file and are the
single source of truth at training and inference time. A ``.json`` sidecar
repeats the header and stats for human inspection.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"OFD1"
FORMAT_VERSION = 1
KINDS = ("jp", "obs")
_HEADER = struct.Struct("<4sHBBIIIIIQ")


class FormatError(ValueError):
    pass


def _safe_range(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    return np.where(span < 1e-12, 1.0, span)


@dataclass
class NormStats:
    """Per-dimension min/max for both sides; maps data into [-1, 1]."""

    cond_min: np.ndarray
    cond_max: np.ndarray
    act_min: np.ndarray
    act_max: np.ndarray

    def __post_init__(self):
        for lo, hi in ((self.cond_min, self.cond_max), (self.act_min, self.act_max)):
            if np.any(lo > hi):
                raise FormatError("normalization stats require min <= max per dimension")

    @classmethod
    def from_arrays(cls, cond: np.ndarray, actions: np.ndarray) -> "NormStats":
        return cls(
            cond_min=cond.reshape(-1, cond.shape[-1]).min(axis=0).astype(np.float32),
            cond_max=cond.reshape(-1, cond.shape[-1]).max(axis=0).astype(np.float32),
            act_min=actions.reshape(-1, actions.shape[-1]).min(axis=0).astype(np.float32),
            act_max=actions.reshape(-1, actions.shape[-1]).max(axis=0).astype(np.float32),
        )

    def normalize_cond(self, x: np.ndarray) -> np.ndarray:
        span = _safe_range(self.cond_min, self.cond_max)
        return (2.0 * (x - self.cond_min) / span - 1.0).astype(np.float32)

    def denormalize_cond(self, x: np.ndarray) -> np.ndarray:
        span = _safe_range(self.cond_min, self.cond_max)
        return (0.5 * (x + 1.0) * span + self.cond_min).astype(np.float32)

    def normalize_action(self, x: np.ndarray) -> np.ndarray:
        span = _safe_range(self.act_min, self.act_max)
        return (2.0 * (x - self.act_min) / span - 1.0).astype(np.float32)

    def denormalize_action(self, x: np.ndarray) -> np.ndarray:
        span = _safe_range(self.act_min, self.act_max)
        return (0.5 * (x + 1.0) * span + self.act_min).astype(np.float32)

    def to_dict(self) -> dict:
        return {
            "cond_min": self.cond_min.tolist(),
            "cond_max": self.cond_max.tolist(),
            "act_min": self.act_min.tolist(),
            "act_max": self.act_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            cond_min=np.asarray(d["cond_min"], dtype=np.float32),
            cond_max=np.asarray(d["cond_max"], dtype=np.float32),
            act_min=np.asarray(d["act_min"], dtype=np.float32),
            act_max=np.asarray(d["act_max"], dtype=np.float32),
        )


@dataclass
class Dataset:
    kind: str
    cond: np.ndarray  # (n_samples, n_obs, cond_dim) float32
    actions: np.ndarray  # (n_samples, horizon, action_dim) float32
    stats: NormStats
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FormatError(f"unknown dataset kind {self.kind!r}")
        self.cond = np.asarray(self.cond, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.cond.ndim != 3 or self.actions.ndim != 3:
            raise FormatError("cond must be (n, n_obs, cond_dim); actions (n, horizon, action_dim)")
        if self.cond.shape[0] != self.actions.shape[0]:
            raise FormatError("cond and actions disagree on sample count")

    @property
    def n_samples(self) -> int:
        return self.cond.shape[0]

    @property
    def n_obs(self) -> int:
        return self.cond.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.cond.shape[2]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def header_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_samples": self.n_samples,
            "n_obs": self.n_obs,
            "cond_dim": self.cond_dim,
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "seed": self.seed,
        }


def merge_datasets(datasets: list) -> Dataset:
    """Pool several datasets of the same kind and window shape into one,
    recomputing normalization stats over the union. Used for multi-task
    training on demos collected per task."""
    if not datasets:
        raise FormatError("nothing to merge")
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.kind != first.kind:
            raise FormatError(f"cannot merge kinds {first.kind!r} and {ds.kind!r}")
        if ds.cond.shape[1:] != first.cond.shape[1:] or ds.actions.shape[1:] != first.actions.shape[1:]:
            raise FormatError("cannot merge datasets with different window shapes")
    cond = np.concatenate([ds.cond for ds in datasets], axis=0)
    actions = np.concatenate([ds.actions for ds in datasets], axis=0)
    stats = NormStats.from_arrays(cond, actions)
    return Dataset(kind=first.kind, cond=cond, actions=actions, stats=stats,
                   seed=first.seed)


def dataset_bytes(ds: Dataset) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        KINDS.index(ds.kind),
        0,
        ds.n_samples,
        ds.n_obs,
        ds.cond_dim,
        ds.horizon,
        ds.action_dim,
        ds.seed,
    )
    stats = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (ds.stats.cond_min, ds.stats.cond_max, ds.stats.act_min, ds.stats.act_max)
    )
    body = bytearray()
    for i in range(ds.n_samples):
        body += np.ascontiguousarray(ds.cond[i], dtype="<f4").tobytes()
        body += np.ascontiguousarray(ds.actions[i], dtype="<f4").tobytes()
    return header + stats + bytes(body)


def save_dataset(path, ds: Dataset) -> str:
    """Write the binary file plus a JSON sidecar; returns the file sha256."""
    blob = dataset_bytes(ds)
    p = Path(path)
    p.write_bytes(blob)
    sidecar = dict(ds.header_dict(), stats=ds.stats.to_dict(), sha256=hashlib.sha256(blob).hexdigest())
    p.with_suffix(p.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar["sha256"]


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    magic, version, kind_idx, _, n, n_obs, cond_dim, horizon, action_dim, seed = _HEADER.unpack(
        blob[: _HEADER.size]
    )
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if kind_idx >= len(KINDS):
        raise FormatError(f"unknown dataset kind byte {kind_idx}")
    off = _HEADER.size
    stats_len = 4 * (2 * cond_dim + 2 * action_dim)
    sample_len = 4 * (n_obs * cond_dim + horizon * action_dim)
    if len(blob) != off + stats_len + n * sample_len:
        raise FormatError(
            f"dataset length mismatch: expected {off + stats_len + n * sample_len} bytes, got {len(blob)}"
        )

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob[off : off + 4 * count], dtype="<f4").copy()
        off += 4 * count
        return arr

    stats = NormStats(
        cond_min=take(cond_dim), cond_max=take(cond_dim),
        act_min=take(action_dim), act_max=take(action_dim),
    )
    cond = np.empty((n, n_obs, cond_dim), dtype=np.float32)
    actions = np.empty((n, horizon, action_dim), dtype=np.float32)
    for i in range(n):
        cond[i] = take(n_obs * cond_dim).reshape(n_obs, cond_dim)
        actions[i] = take(horizon * action_dim).reshape(horizon, action_dim)
    return Dataset(kind=KINDS[kind_idx], cond=cond, actions=actions, stats=stats, seed=seed)


def load_dataset(path) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"dataset not found: {p}")
    return dataset_from_bytes(p.read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
