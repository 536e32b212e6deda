"""Training-throughput benchmark: timed optimizer steps on synthetic batches.

Timing covers the forward pass, backward pass, and optimizer update only.
Data generation happens up front and I/O is excluded, so the normal-versus-
decoupled delta isolates what freezing the generator saves.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass

import numpy as np

from . import grad
from .backbones import BackboneConfig, CondConfig, Policy
from .dataset import NormStats
from .diffusion import eps_loss, make_schedule, q_sample
from .training import AdamW

MODES = ("normal", "decoupled")


class BenchError(ValueError):
    pass


@dataclass
class BenchReport:
    backbone: str
    mode: str
    iters_per_s: float        # median over timed windows
    iters_mean: float
    iters_std: float
    batch_size: int
    n_timed: int
    warmup: int
    windows: int
    param_counts: dict
    trainable: int
    host: str

    def __post_init__(self):
        if self.iters_per_s <= 0:
            raise BenchError("iterations/s must be positive")
        if self.mode not in MODES:
            raise BenchError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "mode": self.mode,
            "iters_per_s": self.iters_per_s,
            "iters_mean": self.iters_mean,
            "iters_std": self.iters_std,
            "batch_size": self.batch_size,
            "n_timed": self.n_timed,
            "warmup": self.warmup,
            "windows": self.windows,
            "param_counts": dict(self.param_counts),
            "trainable": self.trainable,
            "host": self.host,
        }


def host_descriptor() -> str:
    return (f"{platform.system()}-{platform.machine()} "
            f"python{platform.python_version()} numpy{np.__version__}")


def _synthetic_batch(cfg: BackboneConfig, cond: CondConfig, batch: int,
                     rng: np.random.Generator):
    cond_rows = rng.uniform(-1, 1, (batch, cond.n_obs, cond.cond_dim)).astype(np.float32)
    actions = rng.uniform(-1, 1, (batch, cfg.horizon, cfg.action_dim)).astype(np.float32)
    return cond_rows, actions


def _unit_stats(cond: CondConfig, cfg: BackboneConfig) -> NormStats:
    return NormStats(
        cond_min=np.full(cond.cond_dim, -1.0, np.float32),
        cond_max=np.full(cond.cond_dim, 1.0, np.float32),
        act_min=np.full(cfg.action_dim, -1.0, np.float32),
        act_max=np.full(cfg.action_dim, 1.0, np.float32),
    )


def run_bench(kind: str, mode: str, batch_size: int = 64, n_timed: int = 30,
              warmup: int = 5, windows: int = 5, seed: int = 0,
              backbone: BackboneConfig | None = None,
              timesteps: int = 100) -> BenchReport:
    """W warmup steps, then `windows` timed windows of `n_timed` optimizer
    steps each. Decoupled mode freezes the generator and timestep encoder."""
    if mode not in MODES:
        raise BenchError(f"mode must be one of {MODES}, got {mode!r}")
    if n_timed < 10:
        raise BenchError(f"n_timed must be at least 10 for a stable reading, got {n_timed}")
    if warmup < 0 or windows < 1:
        raise BenchError("warmup must be >= 0 and windows >= 1")
    if batch_size < 1:
        raise BenchError("batch_size must be positive")

    cfg = backbone if backbone is not None else BackboneConfig(kind=kind)
    if cfg.kind != kind:
        raise BenchError(f"backbone config kind {cfg.kind!r} does not match {kind!r}")
    cond = CondConfig(mode="obs", n_obs=2, cond_dim=14)
    policy = Policy(cfg, cond, _unit_stats(cond, cfg), seed=seed)
    if mode == "decoupled":
        policy.store.freeze(("G", "FTAU"))
    sched = make_schedule(timesteps, "squaredcos")
    opt = AdamW(policy.store.trainable(), lr=1e-4)

    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(seed + 1)
    cond_rows, actions = _synthetic_batch(cfg, cond, batch_size, rng)

    def one_step():
        taus = rng.integers(0, sched.T, batch_size)
        noise = rng.standard_normal(actions.shape).astype(np.float32)
        x_t = q_sample(actions, taus, noise, sched)
        pred = policy.forward(x_t, taus, cond_rows, mode="train", rng=drop_rng)
        loss = eps_loss(pred, grad.Tensor(noise))
        loss.backward()
        opt.step()
        policy.store.zero_grad()

    for _ in range(warmup):
        one_step()

    rates = []
    for _ in range(windows):
        t0 = time.perf_counter()
        for _ in range(n_timed):
            one_step()
        rates.append(n_timed / (time.perf_counter() - t0))

    counts = policy.param_counts()
    return BenchReport(
        backbone=kind,
        mode=mode,
        iters_per_s=float(np.median(rates)),
        iters_mean=float(np.mean(rates)),
        iters_std=float(np.std(rates)),
        batch_size=batch_size,
        n_timed=n_timed,
        warmup=warmup,
        windows=windows,
        param_counts=counts,
        trainable=sum(p.size for p in policy.store.trainable()),
        host=host_descriptor(),
    )


def bench_pair(kind: str, **kw) -> tuple[BenchReport, BenchReport]:
    """Normal and decoupled throughput for one backbone, same settings."""
    return run_bench(kind, "normal", **kw), run_bench(kind, "decoupled", **kw)


def comparison_rows(reports: list[BenchReport]) -> list[dict]:
    """Flatten reports into normal-vs-decoupled rows per backbone."""
    by_kind: dict[str, dict] = {}
    for r in reports:
        by_kind.setdefault(r.backbone, {})[r.mode] = r
    rows = []
    for kind in sorted(by_kind):
        pair = by_kind[kind]
        row = {"backbone": kind}
        for m in MODES:
            row[m] = pair[m].iters_per_s if m in pair else None
        if row["normal"] and row["decoupled"]:
            row["speedup_pct"] = 100.0 * (row["decoupled"] / row["normal"] - 1.0)
        else:
            row["speedup_pct"] = None
        rows.append(row)
    return rows
