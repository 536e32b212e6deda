"""Two-stage decoupled training, the normal baseline, and the optimizer.

Stage 1 trains the denoiser backbone, timestep head, and conditioning
projections on observation-free joint-position data (no observation encoder
exists). Stage 2 rebuilds the conditioning stack fresh for observations,
copies the backbone and timestep head from the stage-1 checkpoint, and
freezes them: their bytes must be identical before and after training, and
only the fresh parameters ever see optimizer state.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad
from .backbones import BackboneConfig, CondConfig, Policy
from .checkpoint import Checkpoint, checkpoint_bytes, load_checkpoint, file_sha256
from .dataset import Dataset, NormStats, dataset_bytes
from .diffusion import NoiseSchedule, eps_loss, make_schedule, q_sample

log = logging.getLogger(__name__)

STAGES = ("normal", "stage1", "stage2")


class TrainError(Exception):
    pass


@dataclass
class TrainConfig:
    stage: str
    backbone: BackboneConfig
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-6
    seed: int = 0
    ema_decay: float | None = None
    timesteps: int = 100
    schedule: str = "squaredcos"
    lr_schedule: str = "constant"  # or "cosine" (decay to ~0 over the run)
    save_every: int = 0  # epochs between periodic checkpoint writes (0 = end only)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise TrainError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.ema_decay is not None and not (0.0 <= self.ema_decay < 1.0):
            raise TrainError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "backbone": self.backbone.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "ema_decay": self.ema_decay,
            "timesteps": self.timesteps,
            "schedule": self.schedule,
            "lr_schedule": self.lr_schedule,
        }


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay.

    Only parameters with requires_grad=True are registered; frozen parameters
    never get moment buffers. A step containing any non-finite gradient is
    rejected wholesale (no parameter or state mutation) and logged.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rejected = 0

    def step(self) -> bool:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                self.rejected += 1
                log.warning("non-finite gradient on %s; step %d rejected",
                            getattr(p, "name", "<param>"), self.t + 1)
                return False
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = p.data - self.lr * np.asarray(update, dtype=p.data.dtype)
        return True


# ---------------------------------------------------------------------------
# exponential moving average (optional; off by default)
# ---------------------------------------------------------------------------

def ema_update(shadow: dict, params, decay: float) -> dict:
    """shadow <- decay * shadow + (1 - decay) * param, trainable params only."""
    if not (0.0 <= decay < 1.0):
        raise TrainError(f"ema decay must be in [0, 1), got {decay}")
    for p in params:
        if not p.requires_grad:
            continue
        if p.name not in shadow:
            shadow[p.name] = p.data.copy()
        else:
            shadow[p.name] = decay * shadow[p.name] + (1.0 - decay) * p.data
    return shadow


class EMA:
    def __init__(self, store, decay: float):
        self.decay = decay
        self.store = store
        self.shadow = {p.name: p.data.copy() for p in store.trainable()}

    def update(self):
        ema_update(self.shadow, self.store.trainable(), self.decay)

    def copy_to_store(self):
        for name, arr in self.shadow.items():
            self.store[name].data = arr.astype(np.float32).copy()


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: Policy
    schedule: NoiseSchedule
    meta: dict
    final_loss: float
    loss_history: list = field(default_factory=list)
    checkpoint_sha: str | None = None
    path: str | None = None


def dataset_sha256(ds: Dataset) -> str:
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()


class MetricsWriter:
    COLUMNS = ("step", "epoch", "loss", "lr", "iters_per_s", "timestamp")

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)

    def append(self, step, epoch, loss, lr, iters_per_s):
        if not self.path:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(
                [step, epoch, f"{loss:.8f}", lr, f"{iters_per_s:.3f}", f"{time.time():.3f}"])


def _loop(policy: Policy, ds: Dataset, sched: NoiseSchedule, cfg: TrainConfig,
          metrics: MetricsWriter, save_cb=None) -> list:
    n = ds.n_samples
    if ds.action_dim != policy.cfg.action_dim or ds.horizon != policy.cfg.horizon:
        raise TrainError(
            f"dataset chunk shape ({ds.horizon}, {ds.action_dim}) does not match "
            f"backbone ({policy.cfg.horizon}, {policy.cfg.action_dim})"
        )
    data_rng, drop_rng = (np.random.default_rng(s)
                          for s in np.random.SeedSequence(cfg.seed).spawn(2))
    actions = policy.stats.normalize_action(ds.actions)
    cond = ds.cond
    opt = AdamW(policy.store.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EMA(policy.store, cfg.ema_decay) if cfg.ema_decay is not None else None

    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    last_t = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = data_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            b = len(idx)
            taus = data_rng.integers(0, sched.T, size=b)
            noise = data_rng.standard_normal((b, ds.horizon, ds.action_dim)).astype(np.float32)
            x_t = q_sample(actions[idx], taus, noise, sched)
            pred = policy.forward(x_t, taus, cond[idx], mode="train", rng=drop_rng)
            loss = eps_loss(pred, grad.Tensor(noise))
            loss_val = float(loss.data)
            grad.backward(loss)
            if cfg.lr_schedule == "cosine":
                opt.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            opt.step()
            policy.store.zero_grad()
            if ema is not None:
                ema.update()
            step += 1
            now = time.perf_counter()
            metrics.append(step, epoch, loss_val, opt.lr, 1.0 / max(now - last_t, 1e-9))
            last_t = now
            epoch_losses.append(loss_val)
        history.append(float(np.mean(epoch_losses)))
        if save_cb and cfg.save_every and (epoch + 1) % cfg.save_every == 0:
            save_cb(history)
    if ema is not None:
        ema.copy_to_store()
    return history


def _finish(policy: Policy, sched: NoiseSchedule, cfg: TrainConfig, ds: Dataset,
            history: list, out_path, parent_sha: str | None) -> TrainResult:
    meta = dict(policy.meta())
    meta["schedule"] = sched.to_dict()
    meta["train"] = dict(cfg.to_dict(),
                         dataset_sha256=dataset_sha256(ds),
                         parent_sha256=parent_sha,
                         initial_loss=history[0],
                         final_loss=history[-1])
    res = TrainResult(policy=policy, schedule=sched, meta=meta,
                      final_loss=history[-1], loss_history=history)
    if out_path is not None:
        blob = checkpoint_bytes(policy.state_arrays(), meta=meta)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_bytes(blob)
        res.checkpoint_sha = hashlib.sha256(blob).hexdigest()
        res.path = str(out_path)
        log.info("checkpoint written to %s (%s)", out_path, res.checkpoint_sha[:12])
    log.info("final train loss %.6f over %d epochs", history[-1], len(history))
    return res


def _save_cb(policy, sched, cfg, ds, out_path, parent_sha):
    if out_path is None:
        return None

    def cb(history):
        _finish(policy, sched, cfg, ds, history, out_path, parent_sha)

    return cb


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def train_stage1(cfg: TrainConfig, ds: Dataset, out_path=None, metrics_path=None) -> TrainResult:
    """Observation-free pretraining: backbone + timestep head + conditioning
    projections learn to denoise action chunks given joint-position windows."""
    if cfg.stage != "stage1":
        raise TrainError(f"config stage is {cfg.stage!r}, expected 'stage1'")
    if ds.kind != "jp":
        raise TrainError(f"stage 1 requires an observation-free (jp) dataset, got {ds.kind!r}")
    sched = make_schedule(cfg.timesteps, cfg.schedule)
    cond_cfg = CondConfig(mode="jp", n_obs=ds.n_obs, cond_dim=ds.cond_dim)
    policy = Policy(cfg.backbone, cond_cfg, ds.stats, seed=cfg.seed)
    assert policy.store.count("PHI") == 0
    metrics = MetricsWriter(metrics_path)
    history = _loop(policy, ds, sched, cfg, metrics,
                    save_cb=_save_cb(policy, sched, cfg, ds, out_path, None))
    return _finish(policy, sched, cfg, ds, history, out_path, None)


def _load_parent(parent) -> tuple[Checkpoint, str | None]:
    if isinstance(parent, Checkpoint):
        return parent, None
    ck = load_checkpoint(parent)
    return ck, file_sha256(parent)


def train_stage2(cfg: TrainConfig, parent, ds: Dataset, out_path=None,
                 metrics_path=None) -> TrainResult:
    """Decoupled fine-tuning: copy the backbone and timestep head from the
    stage-1 checkpoint, freeze them, and train a fresh observation encoder
    plus conditioning projections on task data.

    Action normalization statistics come from the parent (the frozen
    generator was calibrated against them); conditioning statistics come from
    the task dataset.
    """
    if cfg.stage != "stage2":
        raise TrainError(f"config stage is {cfg.stage!r}, expected 'stage2'")
    if ds.kind != "obs":
        raise TrainError(f"stage 2 requires an observation dataset, got {ds.kind!r}")
    ck, parent_sha = _load_parent(parent)
    parent_cfg = BackboneConfig.from_dict(ck.meta["backbone"])
    if parent_cfg != cfg.backbone:
        raise TrainError(
            f"backbone config mismatch with parent: {parent_cfg.to_dict()} vs "
            f"{cfg.backbone.to_dict()}"
        )
    parent_stats = NormStats.from_dict(ck.meta["stats"])
    sched = NoiseSchedule.from_dict(ck.meta["schedule"])
    stats = NormStats(
        cond_min=ds.stats.cond_min, cond_max=ds.stats.cond_max,
        act_min=parent_stats.act_min, act_max=parent_stats.act_max,
    )
    cond_cfg = CondConfig(mode="obs", n_obs=ds.n_obs, cond_dim=ds.cond_dim)
    policy = Policy(cfg.backbone, cond_cfg, stats, seed=cfg.seed)

    wanted = {p.name: p.data.shape for p in policy.store.parameters()
              if p.partition in ("G", "FTAU")}
    have = {name: arr.shape for name, arr in ck.params.items()
            if ck.partitions.get(name) in ("G", "FTAU")}
    if wanted != have:
        missing = sorted(set(wanted) - set(have))
        extra = sorted(set(have) - set(wanted))
        shapes = sorted(n for n in set(wanted) & set(have) if wanted[n] != have[n])
        raise TrainError(
            f"parent checkpoint incompatible: missing {missing}, extra {extra}, "
            f"shape mismatches {shapes}"
        )
    for name in wanted:
        policy.store[name].data = np.asarray(ck.params[name], dtype=np.float32).copy()
    policy.store.freeze(("G", "FTAU"))

    trainable = sum(p.size for p in policy.store.trainable())
    counts = policy.param_counts()
    if trainable != counts["PHI"] + counts["FCOND"]:
        raise TrainError("trainable parameters must be exactly the fresh conditioning stack")
    log.info("stage 2: %d trainable (PHI %d + FCOND %d), %d frozen",
             trainable, counts["PHI"], counts["FCOND"], counts["G"] + counts["FTAU"])

    metrics = MetricsWriter(metrics_path)
    history = _loop(policy, ds, sched, cfg, metrics,
                    save_cb=_save_cb(policy, sched, cfg, ds, out_path, parent_sha))
    return _finish(policy, sched, cfg, ds, history, out_path, parent_sha)


def train_normal(cfg: TrainConfig, ds: Dataset, out_path=None, metrics_path=None) -> TrainResult:
    """End-to-end baseline: every partition trains jointly on task data."""
    if cfg.stage != "normal":
        raise TrainError(f"config stage is {cfg.stage!r}, expected 'normal'")
    sched = make_schedule(cfg.timesteps, cfg.schedule)
    mode = "jp" if ds.kind == "jp" else "obs"
    cond_cfg = CondConfig(mode=mode, n_obs=ds.n_obs, cond_dim=ds.cond_dim)
    policy = Policy(cfg.backbone, cond_cfg, ds.stats, seed=cfg.seed)
    metrics = MetricsWriter(metrics_path)
    history = _loop(policy, ds, sched, cfg, metrics,
                    save_cb=_save_cb(policy, sched, cfg, ds, out_path, None))
    return _finish(policy, sched, cfg, ds, history, out_path, None)


def policy_from_checkpoint(path_or_ck) -> tuple[Policy, NoiseSchedule]:
    """Rebuild a runnable policy from a checkpoint written by any stage."""
    ck, _ = _load_parent(path_or_ck)
    bc = BackboneConfig.from_dict(ck.meta["backbone"])
    cc = CondConfig.from_dict(ck.meta["cond"])
    stats = NormStats.from_dict(ck.meta["stats"])
    sched = NoiseSchedule.from_dict(ck.meta["schedule"])
    policy = Policy(bc, cc, stats, seed=ck.meta.get("seed", 0))
    policy.store.load_state(ck.params)
    return policy, sched
