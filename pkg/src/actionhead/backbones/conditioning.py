"""Conditioning pathways shared by the denoiser backbones.

Partition assignments (see ``nn.PARTITIONS``):

- sinusoidal timestep features plus their learned projection head: ``FTAU``
- observation window encoders: ``PHI`` (absent when conditioning directly on
  joint positions)
- per-block FiLM projections and memory-side token machinery: ``FCOND``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import grad, nn
from ..diffusion import DiffusionError, build_global_cond


def timestep_embed(tau, dim: int) -> np.ndarray:
    """Sinusoidal embedding [sin || cos] at geometrically spaced frequencies.

    tau=0 maps to zeros in the sin half and ones in the cos half, so its norm
    is sqrt(dim/2).
    """
    if dim % 2 != 0 or dim < 4:
        raise DiffusionError(f"timestep embedding dim must be even and >= 4, got {dim}")
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    angles = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(np.float32)


def sinusoid_positions(n: int, dim: int) -> np.ndarray:
    """Position encodings for a token sequence, same construction as the
    timestep embedding."""
    return timestep_embed(np.arange(n), dim)


class TimestepEncoder:
    """Learned head over the sinusoidal features (the tau pathway)."""

    def __init__(self, store: nn.ParamStore, rng: np.random.Generator,
                 sin_dim: int = 64, out_dim: int = 64, hidden: int = 128):
        self.sin_dim = sin_dim
        self.out_dim = out_dim
        self.l1 = nn.Linear(store, "ftau.l1", sin_dim, hidden, "FTAU", rng)
        self.l2 = nn.Linear(store, "ftau.l2", hidden, out_dim, "FTAU", rng)

    def __call__(self, tau: np.ndarray) -> grad.Tensor:
        emb = grad.Tensor(timestep_embed(tau, self.sin_dim))
        return self.l2(grad.mish(self.l1(emb)))


@dataclass
class ObsEncoderConfig:
    n_obs: int
    obs_dim: int
    hidden: int = 128
    feat_dim: int = 64
    per_frame: bool = False  # token backbones encode each frame separately

    def to_dict(self) -> dict:
        return {
            "n_obs": self.n_obs,
            "obs_dim": self.obs_dim,
            "hidden": self.hidden,
            "feat_dim": self.feat_dim,
            "per_frame": self.per_frame,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObsEncoderConfig":
        return cls(**d)


class ObsEncoder:
    """MLP observation encoder (the trainable input pathway in stage 2)."""

    def __init__(self, store: nn.ParamStore, cfg: ObsEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_in = cfg.obs_dim if cfg.per_frame else cfg.n_obs * cfg.obs_dim
        self.l1 = nn.Linear(store, "phi.l1", d_in, cfg.hidden, "PHI", rng)
        self.l2 = nn.Linear(store, "phi.l2", cfg.hidden, cfg.feat_dim, "PHI", rng)

    def __call__(self, window: np.ndarray) -> grad.Tensor:
        """(B, n_obs, obs_dim) -> (B, feat_dim), or per-frame
        (B, n_obs, obs_dim) -> (B, n_obs, feat_dim)."""
        window = np.asarray(window, dtype=np.float32)
        if window.ndim != 3 or window.shape[1:] != (self.cfg.n_obs, self.cfg.obs_dim):
            raise DiffusionError(
                f"observation window must be (B, {self.cfg.n_obs}, {self.cfg.obs_dim}), "
                f"got {window.shape}"
            )
        if self.cfg.per_frame:
            x = grad.Tensor(window)
        else:
            x = grad.Tensor(window.reshape(window.shape[0], -1))
        return self.l2(grad.mish(self.l1(x)))


class CondAdapter:
    """Turns raw conditioning rows into the observation-side feature vector.

    ``jp`` mode forwards the flattened window untouched (no parameters);
    ``obs`` mode routes through an ObsEncoder.
    """

    def __init__(self, store: nn.ParamStore, mode: str, n_obs: int, cond_dim: int,
                 rng: np.random.Generator, feat_dim: int = 64, hidden: int = 128,
                 per_frame: bool = False):
        if mode not in ("jp", "obs"):
            raise DiffusionError(f"conditioning mode must be 'jp' or 'obs', got {mode!r}")
        self.mode = mode
        self.n_obs = n_obs
        self.cond_dim = cond_dim
        self.per_frame = per_frame
        if mode == "obs":
            self.encoder = ObsEncoder(
                store,
                ObsEncoderConfig(n_obs=n_obs, obs_dim=cond_dim, hidden=hidden,
                                 feat_dim=feat_dim, per_frame=per_frame),
                rng,
            )
            self.out_dim = feat_dim
        else:
            self.encoder = None
            self.out_dim = cond_dim if per_frame else n_obs * cond_dim

    def __call__(self, cond_rows: np.ndarray) -> grad.Tensor:
        cond_rows = np.asarray(cond_rows, dtype=np.float32)
        if cond_rows.ndim != 3 or cond_rows.shape[1:] != (self.n_obs, self.cond_dim):
            raise DiffusionError(
                f"conditioning rows must be (B, {self.n_obs}, {self.cond_dim}), "
                f"got {cond_rows.shape}"
            )
        if self.encoder is not None:
            return self.encoder(cond_rows)
        if self.per_frame:
            return grad.Tensor(cond_rows)
        return grad.Tensor(cond_rows.reshape(cond_rows.shape[0], -1))


def stage1_cond(jp_window: np.ndarray, tau, stats, tau_encoder: TimestepEncoder) -> np.ndarray:
    """Global conditioning for observation-free pretraining: the normalized,
    flattened joint window followed by the timestep features."""
    jp_window = np.asarray(jp_window, dtype=np.float32)
    if jp_window.ndim != 3:
        raise DiffusionError(f"jp window must be (B, n_obs, dof), got {jp_window.shape}")
    flat = stats.normalize_cond(jp_window).reshape(jp_window.shape[0], -1)
    with grad.no_grad():
        tau_feat = tau_encoder(np.asarray(tau)).data
    return build_global_cond(flat, tau_feat)


class FiLMGenerator:
    """One zero-initialized linear projection per modulated block; gamma is
    parameterized as 1 + raw so a fresh stack is an identity modulation."""

    def __init__(self, store: nn.ParamStore, cond_dim: int, widths: list[int],
                 rng: np.random.Generator, prefix: str = "fcond.film"):
        self.cond_dim = cond_dim
        self.widths = list(widths)
        self.projs = [
            nn.Linear(store, f"{prefix}{r}", cond_dim, 2 * w, "FCOND", rng, zero_init=True)
            for r, w in enumerate(self.widths)
        ]

    def __call__(self, cond: grad.Tensor) -> list[tuple[grad.Tensor, grad.Tensor]]:
        if cond.shape[-1] != self.cond_dim:
            raise DiffusionError(
                f"conditioning width {cond.shape[-1]} does not match projection input "
                f"{self.cond_dim}"
            )
        films = []
        for proj, w in zip(self.projs, self.widths):
            raw = proj(cond)
            gamma = grad.add(grad.slice_(raw, (slice(None), slice(0, w))), 1.0)
            beta = grad.slice_(raw, (slice(None), slice(w, 2 * w)))
            films.append((gamma, beta))
        return films


def film_apply(h: grad.Tensor, gamma: grad.Tensor, beta: grad.Tensor) -> grad.Tensor:
    """h' = gamma * h + beta (operands already broadcast-shaped)."""
    return grad.add(grad.mul(h, gamma), beta)


def expand_film(pair, h_ndim: int, channel_axis: int):
    """Reshape a (B, C) FiLM pair so it broadcasts over h's channel axis."""
    gamma, beta = pair
    b, c = gamma.shape
    shape = [1] * h_ndim
    shape[0] = b
    shape[channel_axis] = c
    return grad.reshape(gamma, tuple(shape)), grad.reshape(beta, tuple(shape))
