"""Parameters, parameter stores, and small layer wrappers.

Every parameter carries a partition tag describing its role in the policy:

- ``PHI``: observation encoders (replaced when the conditioning source changes)
- ``FCOND``: conditioning projections that feed modulation into the backbone
- ``G``: the denoiser backbone proper
- ``FTAU``: the learned timestep embedding head

Freezing a partition suppresses updates by marking its leaves
``requires_grad=False``; gradients still flow *through* frozen layers to any
trainable parameters upstream.
"""

from __future__ import annotations

import numpy as np

from . import grad
from .grad import Tensor

PARTITIONS = ("PHI", "FCOND", "G", "FTAU")


class Parameter(Tensor):
    """A named leaf tensor with a partition tag."""

    __slots__ = ("name", "partition")

    def __init__(self, name: str, data, partition: str):
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r} for parameter {name!r}")
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.partition = partition


class ParamStore:
    """Ordered registry of parameters with partition-level freeze control."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, partition: str) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, partition)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self, partition: str | None = None) -> list[Parameter]:
        if partition is None:
            return list(self._params.values())
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        return [p for p in self._params.values() if p.partition == partition]

    def count(self, partition: str | None = None) -> int:
        return sum(p.size for p in self.parameters(partition))

    def partition_counts(self) -> dict[str, int]:
        return {tag: self.count(tag) for tag in PARTITIONS}

    def freeze(self, partitions) -> None:
        tags = {partitions} if isinstance(partitions, str) else set(partitions)
        unknown = tags - set(PARTITIONS)
        if unknown:
            raise ValueError(f"unknown partitions {sorted(unknown)}")
        for p in self._params.values():
            if p.partition in tags:
                p.requires_grad = False
                p.grad = None

    def unfreeze_all(self) -> None:
        for p in self._params.values():
            p.requires_grad = True

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, tuple[np.ndarray, str]]:
        return {name: (p.data, p.partition) for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self._params.items():
            a = np.asarray(arrays[name], dtype=np.float32)
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {a.shape} vs {p.data.shape}")
            p.data = a.copy()


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    """y = x @ W + b with fan-in uniform init (or zero init for heads that
    must start as the identity contribution)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, partition: str,
                 rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        if zero_init:
            w0 = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w0 = _uniform(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.w = store.add(f"{name}.w", w0, partition)
        self.b = None
        if bias:
            b0 = np.zeros(d_out, dtype=np.float32) if zero_init else _uniform(
                rng, (d_out,), 1.0 / np.sqrt(d_in))
            self.b = store.add(f"{name}.b", b0, partition)

    def __call__(self, x: Tensor) -> Tensor:
        out = grad.matmul(x, self.w)
        if self.b is not None:
            out = grad.add(out, self.b)
        return out


class Conv1d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 partition: str, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        bound = 1.0 / np.sqrt(c_in * k)
        self.w = store.add(f"{name}.w", _uniform(rng, (c_out, c_in, k), bound), partition)
        self.b = store.add(f"{name}.b", _uniform(rng, (c_out, 1), bound), partition) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = grad.conv1d(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            out = grad.add(out, self.b)
        return out


class ConvTranspose1d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 partition: str, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        bound = 1.0 / np.sqrt(c_in * k)
        self.w = store.add(f"{name}.w", _uniform(rng, (c_in, c_out, k), bound), partition)
        self.b = store.add(f"{name}.b", _uniform(rng, (c_out, 1), bound), partition) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = grad.conv1d_transpose(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            out = grad.add(out, self.b)
        return out


class LayerNorm:
    """Normalize over the last axis, then apply a learned scale and shift."""

    def __init__(self, store: ParamStore, name: str, d: int, partition: str):
        self.g = store.add(f"{name}.g", np.ones(d, dtype=np.float32), partition)
        self.b = store.add(f"{name}.b", np.zeros(d, dtype=np.float32), partition)

    def __call__(self, x: Tensor) -> Tensor:
        return grad.add(grad.mul(grad.normalize(x, "layer"), self.g), self.b)


class GroupNorm:
    """Normalize (B, C, L) over per-group (C/groups, L) spans, then apply a
    per-channel scale and shift."""

    def __init__(self, store: ParamStore, name: str, groups: int, c: int, partition: str):
        self.groups = groups
        self.g = store.add(f"{name}.g", np.ones((c, 1), dtype=np.float32), partition)
        self.b = store.add(f"{name}.b", np.zeros((c, 1), dtype=np.float32), partition)

    def __call__(self, x: Tensor) -> Tensor:
        return grad.add(grad.mul(grad.normalize(x, "group", groups=self.groups), self.g), self.b)
