"""Dense tensors with reverse-mode automatic differentiation.

A thread-local :class:`Tape` records every differentiable operation in
execution order. ``backward(loss)`` replays the tape in reverse, visiting
each recorded op exactly once, accumulates gradients additively into leaf
tensors, and frees intermediate gradients as it goes.

Training runs in float32; gradient checks use float64 (central finite
differences are unreliable at single precision).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class GradError(ValueError):
    """Raised on shape/precondition violations in tensor ops."""


class Tensor:
    """A dense array with an optional gradient accumulator.

    Tensors are immutable after construction except for ``grad``, which is
    accumulated additively by ``backward`` (two backward passes without a
    reset double the grad).
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
                arr = arr.astype(np.float32)
            elif not isinstance(data, (np.ndarray, np.generic)) and arr.dtype == np.dtype(
                np.float64
            ):
                arr = arr.astype(np.float32)  # bare python floats use training precision
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


class Tape:
    """Ordered record of executed ops; execution order is a valid topological
    order, so reversing it replays adjoints correctly."""

    def __init__(self):
        self.entries: list[tuple[Tensor, object]] = []

    def record(self, out: Tensor, backward_fn) -> None:
        out.is_leaf = False
        self.entries.append((out, backward_fn))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Suspend tape recording (inference / sampling loops)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def clear_tape() -> None:
    _tape().clear()


def tape_length() -> int:
    return len(_tape())


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Rejects non-scalar losses. Intermediate (non-leaf) gradients are freed
    once their op's adjoint has been replayed; the tape is cleared afterwards
    unless ``retain_tape`` is set.
    """
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.is_leaf:
        raise GradError("loss was not produced through taped operations")
    tape = _tape()
    if not any(out is loss for out, _ in reversed(tape.entries)):
        raise GradError("loss is not on the current tape (already consumed?)")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.entries):
        if out.grad is None:
            continue
        fn(out.grad)
        out.grad = None  # non-leaf by construction; free it
    if not retain_tape:
        tape.clear()


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _should_record(*tensors: Tensor) -> bool:
    return _grad_enabled() and any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise GradError(f"add: shapes {a.shape} and {b.shape} are not broadcastable") from None
    out = Tensor(out_data)
    if _should_record(a, b):
        out.requires_grad = True

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))

        _tape().record(out, _bw)
    return out


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise GradError(f"sub: shapes {a.shape} and {b.shape} are not broadcastable") from None
    out = Tensor(out_data)
    if _should_record(a, b):
        out.requires_grad = True

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.shape))

        _tape().record(out, _bw)
    return out


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise GradError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable") from None
    out = Tensor(out_data)
    if _should_record(a, b):
        out.requires_grad = True

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style batching over leading axes.

    Adjoints: dA = dC @ Bᵀ, dB = Aᵀ @ dC (batch axes sum-reduced if
    broadcast).
    """
    a = _wrap(a)
    b = _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise GradError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GradError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    if _should_record(a, b):
        out.requires_grad = True

        def _bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g @ _swap_last(b.data), a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(_swap_last(a.data) @ g, b.shape))

        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if _should_record(x):
        out.requires_grad = True
        orig = x.shape

        def _bw(g):
            x.accumulate_grad(g.reshape(orig))

        _tape().record(out, _bw)
    return out


def transpose(x: Tensor, axes: tuple[int, ...] = ()) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.data.ndim)))
    out = Tensor(x.data.transpose(axes))
    if _should_record(x):
        out.requires_grad = True
        inv = tuple(np.argsort(axes))

        def _bw(g):
            x.accumulate_grad(g.transpose(inv))

        _tape().record(out, _bw)
    return out


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _should_record(*tensors):
        out.requires_grad = True
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t.accumulate_grad(g[tuple(idx)])

        _tape().record(out, _bw)
    return out


def slice_(x: Tensor, key) -> Tensor:
    """Contiguous slicing (tuple of ``slice`` objects, step 1)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) or (k.step not in (None, 1)):
            raise GradError("slice_ supports step-1 slices only")
    out = Tensor(x.data[key].copy())
    if _should_record(x):
        out.requires_grad = True

        def _bw(g):
            full = np.zeros_like(x.data)
            full[key] += g
            x.accumulate_grad(full)

        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(np.mean(x.data, axis=axis, keepdims=False))
    if _should_record(x):
        out.requires_grad = True
        if axis is None:
            n = x.data.size

            def _bw(g):
                x.accumulate_grad(np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True))
        else:
            n = x.shape[axis]

            def _bw(g):
                x.accumulate_grad(
                    np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).astype(x.dtype, copy=True)
                )

        _tape().record(out, _bw)
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error; d/dpred = 2(pred - target)/N."""
    pred = _wrap(pred)
    target = _wrap(target, pred)
    if pred.shape != target.shape:
        raise GradError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    if _should_record(pred, target):
        out.requires_grad = True
        n = pred.data.size

        def _bw(g):
            scaled = (2.0 / n) * g * diff
            if pred.requires_grad:
                pred.accumulate_grad(scaled)
            if target.requires_grad:
                target.accumulate_grad(-scaled)

        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def activation(x: Tensor, kind: str) -> Tensor:
    """Pointwise nonlinearity: ``mish``, ``gelu`` (tanh form) or ``relu``."""
    xd = x.data
    if kind == "relu":
        out_data = np.maximum(xd, 0.0)

        def deriv():
            return (xd > 0.0).astype(xd.dtype)
    elif kind == "mish":
        sp = np.logaddexp(0.0, xd)  # softplus, overflow-safe
        tsp = np.tanh(sp)
        out_data = xd * tsp

        def deriv():
            sig = 1.0 / (1.0 + np.exp(-xd))
            return tsp + xd * (1.0 - tsp * tsp) * sig
    elif kind == "gelu":
        inner = _GELU_C * (xd + 0.044715 * xd**3)
        th = np.tanh(inner)
        out_data = 0.5 * xd * (1.0 + th)

        def deriv():
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
            return 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
    else:
        raise GradError(f"unknown activation kind {kind!r}")
    out = Tensor(out_data.astype(xd.dtype, copy=False))
    if _should_record(x):
        out.requires_grad = True

        def _bw(g):
            x.accumulate_grad(g * deriv())

        _tape().record(out, _bw)
    return out


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def mish(x: Tensor) -> Tensor:
    return activation(x, "mish")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    if x.shape[-1] < 1:
        raise GradError("softmax_rows requires a non-empty last axis")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(out_data)
    if _should_record(x):
        out.requires_grad = True

        def _bw(g):
            # dx = y * (g - sum(g * y))
            inner = np.sum(g * out_data, axis=-1, keepdims=True)
            x.accumulate_grad(out_data * (g - inner))

        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# normalization (pre-affine: callers apply scale/shift themselves)
# ---------------------------------------------------------------------------

def _norm_span(x: Tensor, span_shape: tuple[int, ...], eps: float):
    """Normalize over the trailing span of a view reshaped to (groups, span)."""
    xd = x.data.reshape(span_shape)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    return y, inv


def normalize(x: Tensor, kind: str = "layer", groups: int | None = None, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the normalized span.

    ``layer``: span is the last axis. ``group``: input is (B, C, *spatial),
    span is (C/groups, *spatial) per group; C must divide by ``groups``.
    """
    if kind == "layer":
        n = x.shape[-1]
        if n < 1:
            raise GradError("normalize: zero-extent axis")
        span_shape = (-1, n)
        out_shape = x.shape
    elif kind == "group":
        if groups is None or groups < 1:
            raise GradError("normalize: group norm requires groups >= 1")
        if x.data.ndim < 2:
            raise GradError("normalize: group norm expects (B, C, ...) input")
        b, c = x.shape[0], x.shape[1]
        if c % groups != 0:
            raise GradError(f"normalize: channels {c} not divisible by groups {groups}")
        span = (c // groups) * int(np.prod(x.shape[2:], dtype=np.int64)) if x.data.ndim > 2 else c // groups
        if span < 1:
            raise GradError("normalize: zero-extent span")
        span_shape = (b * groups, span)
        out_shape = x.shape
    else:
        raise GradError(f"unknown normalize kind {kind!r}")

    y, inv = _norm_span(x, span_shape, eps)
    out = Tensor(y.reshape(out_shape))
    if _should_record(x):
        out.requires_grad = True
        n_span = y.shape[-1]

        def _bw(g):
            gs = g.reshape(y.shape)
            # dx = inv * (g - mean(g) - y * mean(g*y)) per span
            gm = gs.mean(axis=-1, keepdims=True)
            gym = (gs * y).mean(axis=-1, keepdims=True)
            dx = inv * (gs - gm - y * gym)
            x.accumulate_grad(dx.reshape(x.shape))

        del n_span
        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element with probability ``p`` and rescale survivors by
    1/(1-p) in train mode; identity in eval mode."""
    if not (0.0 <= p < 1.0):
        raise GradError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise GradError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise GradError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    out = Tensor(x.data * keep * scale)
    if _should_record(x):
        out.requires_grad = True

        def _bw(g):
            x.accumulate_grad(g * keep * scale)

        _tape().record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# temporal convolutions
# ---------------------------------------------------------------------------

def _conv_patches(xp: np.ndarray, k: int, stride: int, l_out: int) -> np.ndarray:
    """(B, C, Lp) -> (B, L_out, C, K) gather of sliding windows."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, Lp-K+1, K)
    return windows[:, :, ::stride, :][:, :, :l_out, :].transpose(0, 2, 1, 3)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along the temporal axis.

    x: (B, C_in, L), w: (C_out, C_in, K) with K odd. Output length
    (L + 2*padding - K) / stride + 1 must be a positive integer.
    """
    x = _wrap(x)
    w = _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise GradError(f"conv1d expects (B,C,L) and (C_out,C_in,K), got {x.shape}, {w.shape}")
    b, c_in, length = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise GradError(f"conv1d: channel mismatch, input {c_in} vs kernel {c_in_w}")
    if k % 2 != 1:
        raise GradError(f"conv1d: kernel width must be odd, got {k}")
    lp = length + 2 * padding
    if k > lp:
        raise GradError(f"conv1d: kernel {k} wider than padded input {lp}")
    if (lp - k) % stride != 0:
        raise GradError(f"conv1d: (L+2p-K)={lp - k} not divisible by stride {stride}")
    l_out = (lp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    patches = _conv_patches(xp, k, stride, l_out)  # (B, L_out, C_in, K)
    col = patches.reshape(b * l_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out_data = (col @ w2.T).reshape(b, l_out, c_out).transpose(0, 2, 1)
    out = Tensor(np.ascontiguousarray(out_data))

    if _should_record(x, w):
        out.requires_grad = True

        def _bw(g):
            gcol = g.transpose(0, 2, 1).reshape(b * l_out, c_out)
            if w.requires_grad:
                w.accumulate_grad((gcol.T @ col).reshape(c_out, c_in, k))
            if x.requires_grad:
                dpatches = (gcol @ w2).reshape(b, l_out, c_in, k).transpose(0, 2, 1, 3)
                dxp = np.zeros((b, c_in, lp), dtype=x.dtype)
                for kk in range(k):
                    dxp[:, :, kk : kk + stride * l_out : stride] += dpatches[:, :, :, kk]
                x.accumulate_grad(dxp[:, :, padding : padding + length] if padding else dxp)

        _tape().record(out, _bw)
    return out


def conv1d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed temporal convolution (fractionally strided upsampling).

    x: (B, C_in, L), w: (C_in, C_out, K); output length
    (L-1)*stride - 2*padding + K.
    """
    x = _wrap(x)
    w = _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise GradError(f"conv1d_transpose expects (B,C,L) and (C_in,C_out,K), got {x.shape}, {w.shape}")
    b, c_in, length = x.shape
    c_in_w, c_out, k = w.shape
    if c_in != c_in_w:
        raise GradError(f"conv1d_transpose: channel mismatch, input {c_in} vs kernel {c_in_w}")
    l_out = (length - 1) * stride - 2 * padding + k
    if l_out < 1:
        raise GradError(f"conv1d_transpose: non-positive output length {l_out}")
    l_full = (length - 1) * stride + k

    xt = x.data.transpose(0, 2, 1)  # (B, L, C_in)
    full = np.zeros((b, c_out, l_full), dtype=x.dtype)
    # scatter positions kk + stride*t are distinct per kk, so slice-add is safe
    contrib = np.einsum("blc,cok->bolk", xt, w.data, optimize=True)  # (B, C_out, L, K)
    for kk in range(k):
        full[:, :, kk : kk + stride * length : stride] += contrib[:, :, :, kk]
    out_data = full[:, :, padding : padding + l_out]
    out = Tensor(np.ascontiguousarray(out_data))

    if _should_record(x, w):
        out.requires_grad = True

        def _bw(g):
            gfull = np.zeros((b, c_out, l_full), dtype=x.dtype)
            gfull[:, :, padding : padding + l_out] = g
            # gather back the scattered windows: (B, C_out, L, K)
            gwin = np.empty((b, c_out, length, k), dtype=x.dtype)
            for kk in range(k):
                gwin[:, :, :, kk] = gfull[:, :, kk : kk + stride * length : stride]
            if x.requires_grad:
                x.accumulate_grad(np.einsum("bolk,cok->bcl", gwin, w.data, optimize=True))
            if w.requires_grad:
                w.accumulate_grad(np.einsum("bolk,blc->cok", gwin, xt, optimize=True))

        _tape().record(out, _bw)
    return out
