"""Transformer denoisers.

Two variants share the same token pipeline (input projection + fixed sinusoid
positions, a stack of post-norm layers, output projection):

- ``DPT``: each layer runs self-attention over the action tokens, then
  cross-attention into a conditioning memory sequence, then a feed-forward
  net. Conditioning enters only through the memory.
- ``DPTFiLM``: the cross-attention is replaced by a second self-attention and
  conditioning enters by FiLM-modulating the feed-forward output before the
  residual add. Same parameter count in the backbone partition as ``DPT``.
"""

from __future__ import annotations

import numpy as np

from .. import grad, nn
from ..grad import Tensor
from .conditioning import expand_film, film_apply, sinusoid_positions


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int):
    """Scaled dot-product attention over (B, T, D) tensors split into heads.

    Returns (output (B, Tq, D), attention weights (B, heads, Tq, Tk)).
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    if d % n_heads != 0:
        raise grad.GradError(f"model width {d} not divisible by {n_heads} heads")
    if k.shape != (b, tk, d) or v.shape != (b, tk, d):
        raise grad.GradError(f"key/value shapes {k.shape}/{v.shape} disagree with query {q.shape}")
    dk = d // n_heads
    qh = grad.transpose(grad.reshape(q, (b, tq, n_heads, dk)), (0, 2, 1, 3))
    kh = grad.transpose(grad.reshape(k, (b, tk, n_heads, dk)), (0, 2, 3, 1))
    vh = grad.transpose(grad.reshape(v, (b, tk, n_heads, dk)), (0, 2, 1, 3))
    scores = grad.mul(grad.matmul(qh, kh), float(1.0 / np.sqrt(dk)))
    attn = grad.softmax_rows(scores)
    out = grad.matmul(attn, vh)
    out = grad.reshape(grad.transpose(out, (0, 2, 1, 3)), (b, tq, d))
    return out, attn


class MultiHeadAttention:
    def __init__(self, store, name, d_model, n_heads, rng, partition="G"):
        self.wq = nn.Linear(store, f"{name}.q", d_model, d_model, partition, rng)
        self.wk = nn.Linear(store, f"{name}.k", d_model, d_model, partition, rng)
        self.wv = nn.Linear(store, f"{name}.v", d_model, d_model, partition, rng)
        self.wo = nn.Linear(store, f"{name}.o", d_model, d_model, partition, rng)
        self.n_heads = n_heads

    def __call__(self, x: Tensor, mem: Tensor | None = None) -> Tensor:
        src = x if mem is None else mem
        out, _ = attention(self.wq(x), self.wk(src), self.wv(src), self.n_heads)
        return self.wo(out)


class FeedForward:
    def __init__(self, store, name, d_model, rng, mult=4):
        self.l1 = nn.Linear(store, f"{name}.l1", d_model, d_model * mult, "G", rng)
        self.l2 = nn.Linear(store, f"{name}.l2", d_model * mult, d_model, "G", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(grad.gelu(self.l1(x)))


class XAttnLayer:
    """Post-norm: self-attention, cross-attention into memory, feed-forward."""

    def __init__(self, store, name, d_model, n_heads, rng):
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d_model, n_heads, rng)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross", d_model, n_heads, rng)
        self.ffn = FeedForward(store, f"{name}.ffn", d_model, rng)
        self.ln1 = nn.LayerNorm(store, f"{name}.ln1", d_model, "G")
        self.ln2 = nn.LayerNorm(store, f"{name}.ln2", d_model, "G")
        self.ln3 = nn.LayerNorm(store, f"{name}.ln3", d_model, "G")

    def __call__(self, x, mem, p, mode, rng):
        x = self.ln1(grad.add(x, grad.dropout(self.self_attn(x), p, mode, rng)))
        x = self.ln2(grad.add(x, grad.dropout(self.cross_attn(x, mem), p, mode, rng)))
        x = self.ln3(grad.add(x, grad.dropout(self.ffn(x), p, mode, rng)))
        return x


class FiLMLayer:
    """Post-norm: two self-attentions, then a feed-forward whose output is
    FiLM-modulated before the residual add."""

    def __init__(self, store, name, d_model, n_heads, rng):
        self.attn1 = MultiHeadAttention(store, f"{name}.self", d_model, n_heads, rng)
        self.attn2 = MultiHeadAttention(store, f"{name}.cross", d_model, n_heads, rng)
        self.ffn = FeedForward(store, f"{name}.ffn", d_model, rng)
        self.ln1 = nn.LayerNorm(store, f"{name}.ln1", d_model, "G")
        self.ln2 = nn.LayerNorm(store, f"{name}.ln2", d_model, "G")
        self.ln3 = nn.LayerNorm(store, f"{name}.ln3", d_model, "G")

    def __call__(self, x, film_pair, p, mode, rng):
        gamma, beta = expand_film(film_pair, 3, 2)
        x = self.ln1(grad.add(x, grad.dropout(self.attn1(x), p, mode, rng)))
        x = self.ln2(grad.add(x, grad.dropout(self.attn2(x), p, mode, rng)))
        t = film_apply(self.ffn(x), gamma, beta)
        x = self.ln3(grad.add(x, grad.dropout(t, p, mode, rng)))
        return x


class _TokenBase:
    def __init__(self, store, cfg, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(store, "g.in_proj", cfg.action_dim, d, "G", rng)
        self.out_proj = nn.Linear(store, "g.out_proj", d, cfg.action_dim, "G", rng)

    def _tokens(self, x_t: np.ndarray) -> Tensor:
        if x_t.ndim != 3 or x_t.shape[2] != self.cfg.action_dim:
            raise grad.GradError(
                f"expected (B, horizon, {self.cfg.action_dim}), got {x_t.shape}")
        h = self.in_proj(Tensor(np.asarray(x_t, dtype=np.float32)))
        pos = sinusoid_positions(x_t.shape[1], self.cfg.d_model)
        return grad.add(h, Tensor(pos))


class DPT(_TokenBase):
    """Cross-attention conditioned transformer denoiser."""

    def __init__(self, store, cfg, rng):
        super().__init__(store, cfg, rng)
        self.film_widths: list[int] = []
        self.layers = [
            XAttnLayer(store, f"g.layer{i}", cfg.d_model, cfg.n_heads, rng)
            for i in range(cfg.depth)
        ]

    def __call__(self, x_t, memory: Tensor, mode, rng) -> Tensor:
        if len(memory.shape) != 3 or memory.shape[2] != self.cfg.d_model:
            raise grad.GradError(
                f"memory must be (B, M, {self.cfg.d_model}), got {memory.shape}")
        h = self._tokens(x_t)
        for layer in self.layers:
            h = layer(h, memory, self.cfg.dropout, mode, rng)
        return self.out_proj(h)


class DPTFiLM(_TokenBase):
    """FiLM conditioned transformer denoiser."""

    def __init__(self, store, cfg, rng):
        super().__init__(store, cfg, rng)
        self.film_widths = [cfg.d_model] * cfg.depth
        self.layers = [
            FiLMLayer(store, f"g.layer{i}", cfg.d_model, cfg.n_heads, rng)
            for i in range(cfg.depth)
        ]

    def __call__(self, x_t, films, mode, rng) -> Tensor:
        if len(films) != len(self.layers):
            raise grad.GradError(f"got {len(films)} FiLM pairs for {len(self.layers)} layers")
        h = self._tokens(x_t)
        for layer, pair in zip(self.layers, films):
            h = layer(h, pair, self.cfg.dropout, mode, rng)
        return self.out_proj(h)
