"""Denoiser backbones and the policy wrapper that wires conditioning to them.

Four interchangeable backbone kinds share one denoiser signature (noisy chunk,
timestep, conditioning rows -> predicted noise):

- ``mlp``: residual MLP over action tokens, FiLM conditioned
- ``conv_unet``: 1-D conv U-Net, FiLM conditioned
- ``transformer_xattn``: transformer with cross-attention into a 3-token
  conditioning memory
- ``transformer_film``: transformer with FiLM on the feed-forward outputs

``Policy`` owns the parameter store, the conditioning pathways, and the
sampler glue, and exposes the per-partition views the two-stage training
recipe freezes and swaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import grad, nn
from ..dataset import NormStats
from ..diffusion import DiffusionError, NoiseSchedule, make_schedule, sample
from ..grad import Tensor
from .conditioning import (
    CondAdapter,
    FiLMGenerator,
    ObsEncoder,
    ObsEncoderConfig,
    TimestepEncoder,
    expand_film,
    film_apply,
    sinusoid_positions,
    stage1_cond,
    timestep_embed,
)
from .mlp import DPMLP
from .transformer import DPT, DPTFiLM, MultiHeadAttention, attention
from .unet import DPCMini

BACKBONE_KINDS = ("mlp", "conv_unet", "transformer_xattn", "transformer_film")


@dataclass
class BackboneConfig:
    kind: str
    horizon: int = 16
    action_dim: int = 10
    d_model: int = 128
    depth: int = 4
    n_heads: int = 4
    dropout: float = 0.1
    down_dims: tuple = (64, 128, 256)
    groups: int = 8
    kernel: int = 5
    tau_sin_dim: int = 64
    tau_dim: int = 64

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise DiffusionError(f"unknown backbone kind {self.kind!r}")
        self.down_dims = tuple(int(d) for d in self.down_dims)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "d_model": self.d_model,
            "depth": self.depth,
            "n_heads": self.n_heads,
            "dropout": self.dropout,
            "down_dims": list(self.down_dims),
            "groups": self.groups,
            "kernel": self.kernel,
            "tau_sin_dim": self.tau_sin_dim,
            "tau_dim": self.tau_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class CondConfig:
    """What the conditioning rows are and how they enter the model.

    ``jp`` rows bypass encoders entirely (observation-free pretraining);
    ``obs`` rows pass through a trainable MLP encoder.
    """

    mode: str
    n_obs: int = 2
    cond_dim: int = 7
    feat_dim: int = 64
    hidden: int = 128

    def __post_init__(self):
        if self.mode not in ("jp", "obs"):
            raise DiffusionError(f"conditioning mode must be 'jp' or 'obs', got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_obs": self.n_obs,
            "cond_dim": self.cond_dim,
            "feat_dim": self.feat_dim,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CondConfig":
        return cls(**d)


_BUILDERS = {
    "mlp": DPMLP,
    "conv_unet": DPCMini,
    "transformer_xattn": DPT,
    "transformer_film": DPTFiLM,
}


class Policy:
    """A denoising policy: backbone + timestep head + conditioning stack.

    Partition layout (every parameter lands in exactly one):

    - ``G``: the backbone, including attention query/key/value/output maps
    - ``FTAU``: the learned projection over sinusoidal timestep features
    - ``PHI``: observation encoders (empty in ``jp`` mode)
    - ``FCOND``: FiLM projections, or the memory-side projections and MLP
      encoder for the cross-attention kind
    """

    def __init__(self, cfg: BackboneConfig, cond: CondConfig, stats: NormStats,
                 seed: int = 0):
        self.cfg = cfg
        self.cond = cond
        self.stats = stats
        self.seed = int(seed)
        self.store = nn.ParamStore()
        rng = np.random.default_rng(seed)

        self.backbone = _BUILDERS[cfg.kind](self.store, cfg, rng)
        self.tau_enc = TimestepEncoder(self.store, rng, sin_dim=cfg.tau_sin_dim,
                                       out_dim=cfg.tau_dim)
        per_frame = cfg.kind == "transformer_xattn"
        self.adapter = CondAdapter(self.store, cond.mode, cond.n_obs, cond.cond_dim,
                                   rng, feat_dim=cond.feat_dim, hidden=cond.hidden,
                                   per_frame=per_frame)

        if per_frame:
            self.film_gen = None
            self.mem_obs = nn.Linear(self.store, "fcond.mem.obs",
                                     self.adapter.out_dim, cfg.d_model, "FCOND", rng)
            self.mem_tau = nn.Linear(self.store, "fcond.mem.tau",
                                     cfg.tau_dim, cfg.d_model, "FCOND", rng)
            self.mem_l1 = nn.Linear(self.store, "fcond.mem.enc.l1",
                                    cfg.d_model, cfg.d_model, "FCOND", rng)
            self.mem_l2 = nn.Linear(self.store, "fcond.mem.enc.l2",
                                    cfg.d_model, cfg.d_model, "FCOND", rng)
        else:
            self.film_gen = FiLMGenerator(
                self.store,
                self.adapter.out_dim + cfg.tau_dim,
                self.backbone.film_widths,
                rng,
            )

    # -- conditioning -------------------------------------------------------

    def _tau_vector(self, tau, batch: int) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau))
        if tau.shape == (1,) and batch > 1:
            tau = np.full(batch, tau[0])
        if tau.shape != (batch,):
            raise DiffusionError(f"tau must broadcast to ({batch},), got shape {tau.shape}")
        return tau

    def _memory(self, cond_feats: Tensor, tau_feat: Tensor) -> Tensor:
        obs_tok = self.mem_obs(cond_feats)
        b = obs_tok.shape[0]
        tau_tok = grad.reshape(self.mem_tau(tau_feat), (b, 1, self.cfg.d_model))
        mem = grad.concat([obs_tok, tau_tok], axis=1)
        pos = sinusoid_positions(self.cond.n_obs + 1, self.cfg.d_model)
        mem = grad.add(mem, Tensor(pos))
        return self.mem_l2(grad.mish(self.mem_l1(mem)))

    def forward(self, x_t: np.ndarray, tau, cond_rows: np.ndarray,
                mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
        """Predict the noise component of x_t. cond_rows are raw (unnormalized)
        conditioning rows of shape (B, n_obs, cond_dim)."""
        x_t = np.asarray(x_t, dtype=np.float32)
        if x_t.ndim != 3:
            raise DiffusionError(f"noisy chunk must be (B, horizon, action_dim), got {x_t.shape}")
        tau = self._tau_vector(tau, x_t.shape[0])
        rows = np.asarray(cond_rows, dtype=np.float32)
        if rows.ndim != 3 or rows.shape[1:] != (self.cond.n_obs, self.cond.cond_dim):
            raise DiffusionError(
                f"conditioning rows must be (B, {self.cond.n_obs}, {self.cond.cond_dim}), "
                f"got {rows.shape}"
            )
        feats = self.adapter(self.stats.normalize_cond(rows))
        tau_feat = self.tau_enc(tau)
        if self.film_gen is None:
            memory = self._memory(feats, tau_feat)
            return self.backbone(x_t, memory, mode, rng)
        global_cond = grad.concat([feats, tau_feat], axis=1)
        films = self.film_gen(global_cond)
        return self.backbone(x_t, films, mode, rng)

    def predict_eps(self, x_t, tau, cond_rows) -> np.ndarray:
        with grad.no_grad():
            return self.forward(x_t, tau, cond_rows, mode="eval").data

    def sample_actions(self, cond_rows: np.ndarray, sched: NoiseSchedule,
                       rng: np.random.Generator, sampler: str = "ddim",
                       k: int = 16, batch: int | None = None) -> np.ndarray:
        """Denoise a normalized action chunk for each conditioning window."""
        cond_rows = np.asarray(cond_rows, dtype=np.float32)
        b = cond_rows.shape[0] if batch is None else batch
        shape = (b, self.cfg.horizon, self.cfg.action_dim)

        def model(x, tau_b, _cond):
            return self.predict_eps(x, tau_b, cond_rows)

        return sample(model, None, sched, shape, rng, sampler=sampler, k=k)

    # -- bookkeeping --------------------------------------------------------

    def param_counts(self) -> dict:
        return self.store.partition_counts()

    def state_arrays(self):
        return self.store.state_arrays()

    def meta(self) -> dict:
        return {
            "backbone": self.cfg.to_dict(),
            "cond": self.cond.to_dict(),
            "stats": self.stats.to_dict(),
            "seed": self.seed,
        }


def build_policy(cfg: BackboneConfig, cond: CondConfig, stats: NormStats,
                 seed: int = 0) -> Policy:
    return Policy(cfg, cond, stats, seed)
