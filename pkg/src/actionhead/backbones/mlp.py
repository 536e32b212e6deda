"""Lightweight MLP denoiser over action tokens.

Each action step is embedded to d_model; a parallel MLP on the normalized
token index injects positional information; R residual blocks follow, each
``linear -> FiLM -> activation -> dropout -> linear -> dropout -> residual +
layer norm``.
"""

from __future__ import annotations

import numpy as np

from .. import grad, nn
from .conditioning import expand_film, film_apply


class DPMLP:
    def __init__(self, store: nn.ParamStore, cfg, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.film_widths = [d] * cfg.depth
        self.in_proj = nn.Linear(store, "g.in_proj", cfg.action_dim, d, "G", rng)
        self.pos1 = nn.Linear(store, "g.pos.l1", 1, d // 2, "G", rng)
        self.pos2 = nn.Linear(store, "g.pos.l2", d // 2, d, "G", rng)
        self.blocks = []
        for r in range(cfg.depth):
            self.blocks.append(
                (
                    nn.Linear(store, f"g.block{r}.l1", d, d, "G", rng),
                    nn.Linear(store, f"g.block{r}.l2", d, d, "G", rng),
                    nn.LayerNorm(store, f"g.block{r}.norm", d, "G"),
                )
            )
        self.out_proj = nn.Linear(store, "g.out_proj", d, cfg.action_dim, "G", rng)

    def positional(self, horizon: int) -> grad.Tensor:
        idx = np.linspace(0.0, 1.0, horizon, dtype=np.float32).reshape(horizon, 1)
        return self.pos2(grad.mish(self.pos1(grad.Tensor(idx))))

    def __call__(self, x_t: np.ndarray, films, mode: str, rng) -> grad.Tensor:
        if x_t.ndim != 3 or x_t.shape[2] != self.cfg.action_dim:
            raise grad.GradError(f"expected (B, horizon, {self.cfg.action_dim}), got {x_t.shape}")
        if len(films) != len(self.blocks):
            raise grad.GradError(
                f"got {len(films)} FiLM pairs for {len(self.blocks)} blocks"
            )
        h = grad.add(self.in_proj(grad.Tensor(np.asarray(x_t, dtype=np.float32))),
                     self.positional(x_t.shape[1]))
        p = self.cfg.dropout
        for (l1, l2, norm), pair in zip(self.blocks, films):
            gamma, beta = expand_film(pair, 3, 2)
            t = film_apply(l1(h), gamma, beta)
            t = grad.dropout(grad.mish(t), p, mode, rng)
            t = grad.dropout(l2(t), p, mode, rng)
            h = norm(grad.add(h, t))
        return self.out_proj(h)
