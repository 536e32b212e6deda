"""Denoising-diffusion machinery for conditional action-chunk generation.

Schedules, the forward noising process, the noise-prediction loss, and two
samplers (stochastic posterior stepping, and the deterministic eta=0
accelerated variant over a subset of steps). Chunks are normalized to
[-1, 1]; the running clean-chunk estimate is clamped there on every reverse
step, which keeps sampling finite for arbitrarily bad model outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad

DEFAULT_T = 100
DEFAULT_SCHEDULE = "squaredcos"
DEFAULT_DDIM_STEPS = 16


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        betas = np.asarray(d["betas"], dtype=np.float64)
        alphas = 1.0 - betas
        return cls(kind=d["kind"], betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def make_schedule(T: int = DEFAULT_T, kind: str = DEFAULT_SCHEDULE,
                  beta_lo: float = 1e-4, beta_hi: float = 2e-2) -> NoiseSchedule:
    """Noise schedule over T steps.

    ``linear`` interpolates betas between the bounds; ``squaredcos`` follows
    the squared-cosine cumulative-alpha curve with betas clipped at 0.999.
    """
    if T < 1:
        raise DiffusionError("schedule needs T >= 1")
    if not (0.0 < beta_lo <= beta_hi < 1.0):
        raise DiffusionError(f"beta bounds must satisfy 0 < lo <= hi < 1, got {beta_lo}, {beta_hi}")
    if kind == "linear":
        betas = np.linspace(beta_lo, beta_hi, T, dtype=np.float64)
    elif kind == "squaredcos":
        def abar(u):
            return np.cos((u + 0.008) / 1.008 * np.pi / 2.0) ** 2

        t = np.arange(T, dtype=np.float64)
        betas = np.clip(1.0 - abar((t + 1) / T) / abar(t / T), 1e-8, 0.999)
    else:
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(kind=kind, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_tau(tau, T: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.int64)
    if np.any(tau < 0) or np.any(tau >= T):
        raise DiffusionError(f"diffusion step index out of range [0, {T})")
    return tau


def q_sample(x0: np.ndarray, tau, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward process: sqrt(abar)*x0 + sqrt(1-abar)*eps.

    ``tau`` may be a scalar or a per-sample vector matching x0's batch axis.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    tau = _check_tau(tau, sched.T)
    ab = sched.alpha_bars[tau]
    if tau.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def eps_loss(eps_pred: grad.Tensor, eps_target) -> grad.Tensor:
    """Mean squared error against the injected noise; differentiable."""
    return grad.mse(eps_pred, eps_target)


def x0_from_eps(x_t: np.ndarray, tau, eps_pred: np.ndarray, sched: NoiseSchedule,
                clamp: bool = True) -> np.ndarray:
    """Invert the forward process for a predicted noise; optionally clamp the
    clean-chunk estimate to the normalized action box."""
    tau = _check_tau(tau, sched.T)
    ab = sched.alpha_bars[tau]
    if tau.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x_t.ndim - 1))
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clamp else x0


def ddpm_step(x_t: np.ndarray, tau: int, eps_pred: np.ndarray, sched: NoiseSchedule,
              rng: np.random.Generator) -> np.ndarray:
    """One stochastic reverse step from tau to tau-1 (noiseless at tau=0)."""
    ab_t = sched.alpha_bars[tau]
    ab_prev = sched.alpha_bars[tau - 1] if tau > 0 else 1.0
    beta_t = sched.betas[tau]
    alpha_t = sched.alphas[tau]
    x0_hat = x0_from_eps(x_t, tau, eps_pred, sched)
    coef_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_xt = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if tau == 0:
        return mean.astype(x_t.dtype, copy=False)
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    noise = rng.standard_normal(x_t.shape)
    return (mean + np.sqrt(var) * noise).astype(x_t.dtype, copy=False)


def ddim_tau_sequence(T: int, k: int) -> np.ndarray:
    """k evenly spaced step indices from T-1 down to 0."""
    if not 1 <= k <= T:
        raise DiffusionError(f"step subset size {k} must be in [1, {T}]")
    taus = np.unique(np.round(np.linspace(0, T - 1, k)).astype(np.int64))
    return taus[::-1]


def ddim_step(x_t: np.ndarray, tau: int, tau_prev: int, eps_pred: np.ndarray,
              sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta=0) jump from tau to tau_prev (tau_prev=-1 lands on
    the clean estimate)."""
    x0_hat = x0_from_eps(x_t, tau, eps_pred, sched)
    if tau_prev < 0:
        return x0_hat.astype(x_t.dtype, copy=False)
    ab_prev = sched.alpha_bars[tau_prev]
    # re-derive the noise direction from the clamped estimate
    ab_t = sched.alpha_bars[tau]
    eps_dir = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_dir
    return out.astype(x_t.dtype, copy=False)


def sample(model, cond_provider, sched: NoiseSchedule, shape: tuple, rng: np.random.Generator,
           sampler: str = "ddim", k: int = DEFAULT_DDIM_STEPS) -> np.ndarray:
    """Draw an action chunk batch by iterative denoising.

    ``model(x_t, tau_vector, cond) -> eps_pred`` on numpy arrays;
    ``cond_provider(tau) -> cond`` supplies whatever conditioning payload the
    model expects at that step (may be None).
    """
    x = rng.standard_normal(shape).astype(np.float32)
    n = shape[0]
    with grad.no_grad():
        if sampler == "ddpm":
            for tau in range(sched.T - 1, -1, -1):
                tau_b = np.full(n, tau, dtype=np.int64)
                eps_pred = model(x, tau_b, cond_provider(tau) if cond_provider else None)
                x = ddpm_step(x, tau, eps_pred, sched, rng)
        elif sampler == "ddim":
            taus = ddim_tau_sequence(sched.T, k)
            for i, tau in enumerate(taus):
                tau_prev = int(taus[i + 1]) if i + 1 < len(taus) else -1
                tau_b = np.full(n, tau, dtype=np.int64)
                eps_pred = model(x, tau_b, cond_provider(int(tau)) if cond_provider else None)
                x = ddim_step(x, int(tau), tau_prev, eps_pred, sched)
        else:
            raise DiffusionError(f"unknown sampler {sampler!r}")
    return np.clip(x, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# global conditioning vector
# ---------------------------------------------------------------------------

def build_global_cond(obs_features: np.ndarray, tau_embedding: np.ndarray) -> np.ndarray:
    """Fixed-order concatenation: observation features first, timestep
    embedding last."""
    if obs_features.shape[0] != tau_embedding.shape[0]:
        raise DiffusionError("conditioning parts disagree on batch size")
    return np.concatenate([obs_features, tau_embedding], axis=-1)


def global_cond_layout(obs_dim: int, tau_dim: int) -> dict:
    return {"order": ["obs", "tau"], "obs_dim": int(obs_dim), "tau_dim": int(tau_dim)}


def split_global_cond(cond: np.ndarray, layout: dict) -> tuple[np.ndarray, np.ndarray]:
    if layout.get("order") != ["obs", "tau"]:
        raise DiffusionError(f"unrecognized conditioning layout {layout!r}")
    d_obs = layout["obs_dim"]
    if cond.shape[-1] != d_obs + layout["tau_dim"]:
        raise DiffusionError("conditioning width disagrees with layout")
    return cond[..., :d_obs], cond[..., d_obs:]
