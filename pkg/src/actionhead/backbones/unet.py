"""1-D convolutional U-Net denoiser with FiLM-modulated residual blocks.

Topology: per resolution level two residual conv blocks then a stride-2
downsample (except at the bottom); two mid blocks; decoder levels concatenate
the matching skip, run two residual blocks, and upsample with a transposed
conv. FiLM lands between the two conv blocks of every residual block.
"""

from __future__ import annotations

import numpy as np

from .. import grad, nn
from .conditioning import expand_film, film_apply


class ConvBlock:
    """conv(k, same length) -> group norm -> mish"""

    def __init__(self, store, name, c_in, c_out, k, groups, rng):
        self.conv = nn.Conv1d(store, f"{name}.conv", c_in, c_out, k, "G", rng,
                              stride=1, padding=k // 2)
        self.norm = nn.GroupNorm(store, f"{name}.norm", groups, c_out, "G")

    def __call__(self, x):
        return grad.mish(self.norm(self.conv(x)))


class ResBlock:
    def __init__(self, store, name, c_in, c_out, k, groups, rng):
        self.block1 = ConvBlock(store, f"{name}.b1", c_in, c_out, k, groups, rng)
        self.block2 = ConvBlock(store, f"{name}.b2", c_out, c_out, k, groups, rng)
        self.res = (
            nn.Conv1d(store, f"{name}.res", c_in, c_out, 1, "G", rng)
            if c_in != c_out
            else None
        )
        self.width = c_out

    def __call__(self, x, film_pair):
        gamma, beta = expand_film(film_pair, 3, 1)
        h = film_apply(self.block1(x), gamma, beta)
        h = self.block2(h)
        return grad.add(h, self.res(x) if self.res is not None else x)


class Downsample:
    """Halves the temporal extent: one zero is prepended so the stride-2
    odd-kernel conv has an exact output length on even inputs (same values a
    symmetric-padding floor-division conv would keep)."""

    def __init__(self, store, name, c, rng):
        self.conv = nn.Conv1d(store, f"{name}", c, c, 3, "G", rng, stride=2, padding=0)
        self.c = c

    def __call__(self, x):
        b, c, length = x.shape
        pad = grad.Tensor(np.zeros((b, c, 1), dtype=np.float32))
        return self.conv(grad.concat([pad, x], axis=2))


class DPCMini:
    def __init__(self, store: nn.ParamStore, cfg, rng: np.random.Generator):
        self.cfg = cfg
        dims = list(cfg.down_dims)
        k, groups = cfg.kernel, cfg.groups
        levels = len(dims)
        if cfg.horizon % (2 ** (levels - 1)) != 0:
            raise grad.GradError(
                f"horizon {cfg.horizon} not divisible by {2 ** (levels - 1)} "
                f"for {levels} resolution levels"
            )
        in_out = [(cfg.action_dim, dims[0])] + list(zip(dims[:-1], dims[1:]))
        self.film_widths = []

        self.down = []
        for i, (c_in, c_out) in enumerate(in_out):
            last = i == len(in_out) - 1
            r1 = ResBlock(store, f"g.down{i}.r1", c_in, c_out, k, groups, rng)
            r2 = ResBlock(store, f"g.down{i}.r2", c_out, c_out, k, groups, rng)
            ds = None if last else Downsample(store, f"g.down{i}.ds", c_out, rng)
            self.down.append((r1, r2, ds))
            self.film_widths += [c_out, c_out]

        mid_c = dims[-1]
        self.mid = [
            ResBlock(store, "g.mid.r1", mid_c, mid_c, k, groups, rng),
            ResBlock(store, "g.mid.r2", mid_c, mid_c, k, groups, rng),
        ]
        self.film_widths += [mid_c, mid_c]

        self.up = []
        for i, (c_in, c_out) in enumerate(reversed(in_out[1:])):
            r1 = ResBlock(store, f"g.up{i}.r1", c_out * 2, c_in, k, groups, rng)
            r2 = ResBlock(store, f"g.up{i}.r2", c_in, c_in, k, groups, rng)
            us = nn.ConvTranspose1d(store, f"g.up{i}.us", c_in, c_in, 4, "G", rng,
                                    stride=2, padding=1)
            self.up.append((r1, r2, us))
            self.film_widths += [c_in, c_in]

        self.final_block = ConvBlock(store, "g.final.b", dims[0], dims[0], k, groups, rng)
        self.final_conv = nn.Conv1d(store, "g.final.conv", dims[0], cfg.action_dim, 1, "G", rng)

    def __call__(self, x_t: np.ndarray, films, mode: str, rng) -> grad.Tensor:
        if x_t.ndim != 3 or x_t.shape[2] != self.cfg.action_dim:
            raise grad.GradError(f"expected (B, horizon, {self.cfg.action_dim}), got {x_t.shape}")
        if len(films) != len(self.film_widths):
            raise grad.GradError(
                f"got {len(films)} FiLM pairs for {len(self.film_widths)} blocks"
            )
        films = list(films)
        x = grad.transpose(grad.Tensor(np.asarray(x_t, dtype=np.float32)), (0, 2, 1))
        skips = []
        for r1, r2, ds in self.down:
            x = r1(x, films.pop(0))
            x = r2(x, films.pop(0))
            skips.append(x)
            if ds is not None:
                x = ds(x)
        for block in self.mid:
            x = block(x, films.pop(0))
        for r1, r2, us in self.up:
            x = grad.concat([x, skips.pop()], axis=1)
            x = r1(x, films.pop(0))
            x = r2(x, films.pop(0))
            x = us(x)
        x = self.final_conv(self.final_block(x))
        return grad.transpose(x, (0, 2, 1))
