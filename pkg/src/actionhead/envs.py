"""Deterministic planar-arm toy tasks with scripted experts and the rollout
evaluator.

The environment is kinematic: the end effector teleports toward the commanded
pose under a per-step displacement clamp, so every episode is a pure function
of (seed, action sequence). Three task families on a 3-link planar arm:

  reach       touch the object marker with an open gripper
  pick-place  grasp the object, carry it to the goal, release
  push        shove the object (a disk the gripper cannot hold) into the goal

Each family comes in left / center / right scene variations, eight variants
total; the in-distribution trio is reach-left, pick-center, push-right.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, checkpoint_bytes, file_sha256, load_checkpoint
from .dataset import Dataset, NormStats
from .kinematics import (
    KinChain,
    KinematicsError,
    canonicalize_quat,
    forward_kinematics,
    load_chain,
    rot6d_to_rotmat,
    rotmat_to_quat,
    rotmat_to_rot6d,
)
from .trajgen import ACTION_DIM, extract_windows
from .training import policy_from_checkpoint

log = logging.getLogger(__name__)

OBS_DIM = 14  # ee pos (3) + ee quat (4) + gripper (1) + object (3) + goal (3)

FAMILIES = ("reach", "pick-place", "push")
VARIATIONS = ("left", "center", "right")

TASK_NAMES = (
    "reach-left",
    "reach-right",
    "pick-center",
    "pick-left",
    "pick-right",
    "push-left",
    "push-center",
    "push-right",
)
IN_TASKS = ("reach-left", "pick-center", "push-right")
OUT_TASKS = tuple(t for t in TASK_NAMES if t not in IN_TASKS)

# Scene sectors (polar angle of the object around the arm base). These line
# up with the joint-space regions the trajectory families cover, so policies
# pretrained on the in-distribution trio have seen the matching workspace.
_SECTORS = {
    "left": (0.35, 1.75),
    "center": (-0.7, 0.7),
    "right": (-1.75, -0.35),
}

# Demo-collection and evaluation episode seeds live in disjoint integer
# ranges by construction.
DEMO_SEED_BASE = 0
DEMO_SEED_STRIDE = 10_000
EVAL_SEED_BASE = 10_000_000
EVAL_SEED_STRIDE = 10_000


def demo_seed(collection_seed: int, episode: int) -> int:
    if not 0 <= episode < DEMO_SEED_STRIDE:
        raise EnvError(f"demo episode index {episode} out of range")
    return DEMO_SEED_BASE + collection_seed * DEMO_SEED_STRIDE + episode


def eval_seed(eval_seed_value: int, rollout: int) -> int:
    if not 0 <= rollout < EVAL_SEED_STRIDE:
        raise EnvError(f"rollout index {rollout} out of range")
    return EVAL_SEED_BASE + eval_seed_value * EVAL_SEED_STRIDE + rollout


class EnvError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tasks and state
# ---------------------------------------------------------------------------

@dataclass
class ToyTask:
    name: str
    family: str
    variation: str
    chain: KinChain
    max_steps: int = 80
    clamp: float = 0.12          # per-step ee displacement bound
    grasp_radius: float = 0.10   # closing the gripper this close grabs
    contact_radius: float = 0.06 # push family: ee-object hard disk radius
    success_radius: float = 0.10
    r_lo: float = 0.45           # scene sampling annulus
    r_hi: float = 1.00

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise EnvError(f"unknown task family {self.family!r}")
        if self.variation not in VARIATIONS:
            raise EnvError(f"unknown scene variation {self.variation!r}")
        if self.max_steps < 1:
            raise EnvError("max_steps must be positive")
        reach = sum(row.a for row in self.chain.rows)
        if self.r_hi > reach:
            raise EnvError(f"annulus radius {self.r_hi} exceeds arm reach {reach}")

    @property
    def sector(self) -> tuple[float, float]:
        return _SECTORS[self.variation]


def make_task(name: str, max_steps: int = 80) -> ToyTask:
    if name not in TASK_NAMES:
        raise EnvError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    prefix, variation = name.rsplit("-", 1)
    family = {"reach": "reach", "pick": "pick-place", "push": "push"}[prefix]
    return ToyTask(name=name, family=family, variation=variation,
                   chain=load_chain("planar3"), max_steps=max_steps)


def task_catalog(max_steps: int = 80) -> dict[str, ToyTask]:
    return {name: make_task(name, max_steps) for name in TASK_NAMES}


@dataclass
class TaskState:
    task: ToyTask
    ee_pos: np.ndarray
    ee_R: np.ndarray
    gripper: float
    obj_pos: np.ndarray
    goal_pos: np.ndarray
    grasped: bool = False
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: int = 0
    success: bool = False
    aborted: bool = False
    done: bool = False

    def clone(self) -> "TaskState":
        return TaskState(
            task=self.task,
            ee_pos=self.ee_pos.copy(),
            ee_R=self.ee_R.copy(),
            gripper=self.gripper,
            obj_pos=self.obj_pos.copy(),
            goal_pos=self.goal_pos.copy(),
            grasped=self.grasped,
            grasp_offset=self.grasp_offset.copy(),
            t=self.t,
            success=self.success,
            aborted=self.aborted,
            done=self.done,
        )


def _polar(r: float, theta: float) -> np.ndarray:
    return np.array([r * np.cos(theta), r * np.sin(theta), 0.0])


def reset(task: ToyTask, seed: int) -> TaskState:
    """Place the scene deterministically from the seed, arm at home."""
    if seed < 0:
        raise EnvError(f"seed must be non-negative, got {seed}")
    rng = np.random.default_rng(np.random.SeedSequence((hash_name(task.name), seed)))
    lo, hi = task.sector
    obj = _polar(rng.uniform(task.r_lo, task.r_hi), rng.uniform(lo, hi))
    if task.family == "reach":
        goal = obj.copy()
    else:
        for _ in range(200):
            goal = _polar(rng.uniform(task.r_lo, task.r_hi), rng.uniform(lo, hi))
            if 0.22 <= np.linalg.norm(goal - obj) <= 0.65:
                break
        else:
            # fall back to a fixed offset inside the annulus
            goal = obj + 0.3 * _unit(np.array([0.0, 0.0, 0.0]) - obj)
    home = np.array([0.0, 0.3, -0.3])  # slightly folded home configuration
    pose = forward_kinematics(task.chain, home)
    return TaskState(task=task, ee_pos=pose.p.copy(), ee_R=pose.R.copy(),
                     gripper=1.0, obj_pos=obj, goal_pos=goal)


def hash_name(name: str) -> int:
    # stable across processes, unlike the builtin hash
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") % (2**31)


def observe(state: TaskState) -> np.ndarray:
    quat = canonicalize_quat(rotmat_to_quat(state.ee_R))
    row = np.concatenate([
        state.ee_pos,
        quat,
        [state.gripper],
        state.obj_pos,
        state.goal_pos,
    ])
    return row.astype(np.float32)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-9:
        return np.array([1.0, 0.0, 0.0])
    return v / n


def _predicate(state: TaskState) -> bool:
    task = state.task
    open_grip = state.gripper >= 0.5
    if task.family == "reach":
        return open_grip and (
            np.linalg.norm(state.ee_pos - state.obj_pos) <= task.success_radius
        )
    at_goal = np.linalg.norm(state.obj_pos - state.goal_pos) <= task.success_radius
    if task.family == "pick-place":
        return at_goal and open_grip and not state.grasped
    return at_goal and open_grip  # push


def step(state: TaskState, action) -> tuple[np.ndarray, bool, bool]:
    """Advance one step. Action is a denormalized end-effector command:
    position (3) + rotation 6d (6) + gripper (1)."""
    if state.done:
        raise EnvError("episode already finished; call reset")
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape[0] != ACTION_DIM:
        raise EnvError(f"action must have {ACTION_DIM} entries, got {action.shape[0]}")
    task = state.task
    if not np.all(np.isfinite(action)):
        state.aborted = True
        state.done = True
        log.warning("non-finite action at step %d on %s; episode aborted",
                    state.t, task.name)
        return observe(state), True, state.success

    delta = action[:3] - state.ee_pos
    delta[2] = 0.0  # planar tasks live in z=0
    dist = np.linalg.norm(delta)
    if dist > task.clamp:
        delta *= task.clamp / dist
        dist = task.clamp

    if task.family == "push":
        # substep the motion so the ee cannot jump through the object disk
        n_sub = max(1, int(np.ceil(dist / (0.5 * task.contact_radius))))
        for _ in range(n_sub):
            state.ee_pos = state.ee_pos + delta / n_sub
            gap = state.obj_pos - state.ee_pos
            if np.linalg.norm(gap) < task.contact_radius:
                state.obj_pos = state.ee_pos + task.contact_radius * _unit(gap)
                state.obj_pos[2] = 0.0
    else:
        state.ee_pos = state.ee_pos + delta

    try:
        state.ee_R = rot6d_to_rotmat(action[3:9])
    except KinematicsError:
        pass  # degenerate orientation command: keep the previous one

    state.gripper = float(np.clip(action[9], 0.0, 1.0))
    closed = state.gripper < 0.5

    if task.family == "pick-place":
        if state.grasped and not closed:
            state.grasped = False
        elif (not state.grasped and closed
              and np.linalg.norm(state.ee_pos - state.obj_pos) <= task.grasp_radius):
            state.grasped = True
            state.grasp_offset = state.obj_pos - state.ee_pos
        if state.grasped:
            state.obj_pos = state.ee_pos + state.grasp_offset

    state.t += 1
    if not state.aborted and _predicate(state):
        state.success = True  # latched
    state.done = state.success or state.t >= task.max_steps
    return observe(state), state.done, state.success


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

def _march(state: TaskState, target: np.ndarray, grip: float) -> np.ndarray:
    """One action row: move toward the target at a sub-clamp speed."""
    speed = 0.8 * state.task.clamp
    delta = target - state.ee_pos
    dist = np.linalg.norm(delta)
    pos = target if dist <= speed else state.ee_pos + speed * _unit(delta)
    row = np.empty(ACTION_DIM)
    row[:3] = pos
    row[3:9] = rotmat_to_rot6d(state.ee_R)
    row[9] = grip
    return row


def _expert_step(state: TaskState) -> np.ndarray:
    """Greedy waypoint policy: approach, grasp, transport, release."""
    task = state.task
    if task.family == "reach":
        return _march(state, state.obj_pos, 1.0)

    if task.family == "pick-place":
        obj_at_goal = (
            np.linalg.norm(state.obj_pos - state.goal_pos)
            <= 0.4 * task.success_radius
        )
        if state.grasped:
            if obj_at_goal:
                return _march(state, state.ee_pos, 1.0)  # release in place
            return _march(state, state.goal_pos - state.grasp_offset, 0.0)
        if obj_at_goal:
            return _march(state, state.ee_pos, 1.0)  # hold, stay open
        if np.linalg.norm(state.ee_pos - state.obj_pos) <= 0.5 * task.grasp_radius:
            return _march(state, state.ee_pos, 0.0)  # close to grasp
        return _march(state, state.obj_pos, 1.0)

    # push: stand behind the object relative to the goal, then drive through it
    to_goal = _unit(state.goal_pos - state.obj_pos)
    if np.linalg.norm(state.obj_pos - state.goal_pos) <= 0.5 * task.success_radius:
        retreat = state.obj_pos - 2.0 * task.contact_radius * to_goal
        return _march(state, retreat, 1.0)  # back off so we stop shoving
    behind = state.obj_pos - 1.5 * task.contact_radius * to_goal
    lined_up = (
        np.linalg.norm(state.ee_pos - behind) <= 0.5 * task.contact_radius
        or float(np.dot(_unit(state.obj_pos - state.ee_pos), to_goal)) > 0.95
    )
    if lined_up:
        return _march(state, state.obj_pos + 0.5 * task.contact_radius * to_goal, 1.0)
    # detour if the straight path to the staging point would clip the object
    seg = behind - state.ee_pos
    seg_len = np.linalg.norm(seg)
    if seg_len > 1e-9:
        u = _unit(seg)
        proj = float(np.dot(state.obj_pos - state.ee_pos, u))
        if 0.0 < proj < seg_len:
            closest = state.ee_pos + proj * u
            if np.linalg.norm(closest - state.obj_pos) < 1.5 * task.contact_radius:
                side = np.array([-u[1], u[0], 0.0])
                if np.dot(side, state.obj_pos - state.ee_pos) > 0:
                    side = -side
                return _march(state, state.obj_pos + 3.0 * task.contact_radius * side, 1.0)
    return _march(state, behind, 1.0)


def scripted_expert(state: TaskState, horizon: int = 16) -> np.ndarray:
    """Emit the expert's next `horizon` actions by rolling a copy of the
    state forward through the real dynamics. Deterministic per state."""
    sim = state.clone()
    chunk = np.empty((horizon, ACTION_DIM))
    for h in range(horizon):
        row = _expert_step(sim)
        chunk[h] = row
        if not sim.done:
            step(sim, row)
    return chunk.astype(np.float32)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class EpisodeLog:
    obs_rows: np.ndarray      # (T, OBS_DIM) observation before each action
    action_rows: np.ndarray   # (T, ACTION_DIM)
    success: bool
    aborted: bool
    length: int


def run_episode(task: ToyTask, seed: int, chunk_fn, exec_steps: int = 8,
                n_obs: int = 2) -> EpisodeLog:
    """Receding-horizon rollout: ask `chunk_fn(state, obs_window)` for an
    action chunk, execute `exec_steps` of it, replan."""
    if exec_steps < 1:
        raise EnvError("exec_steps must be at least 1")
    state = reset(task, seed)
    obs = observe(state)
    hist = [obs] * n_obs
    obs_log, act_log = [], []
    while not state.done:
        chunk = np.asarray(chunk_fn(state, np.stack(hist)))
        if chunk.ndim != 2 or chunk.shape[1] != ACTION_DIM:
            raise EnvError(f"chunk_fn must return (horizon, {ACTION_DIM}), got {chunk.shape}")
        for row in chunk[:exec_steps]:
            obs_log.append(obs)
            act_log.append(np.asarray(row, dtype=np.float32))
            obs, done, _ = step(state, row)
            hist = hist[1:] + [obs]
            if done:
                break
    return EpisodeLog(
        obs_rows=np.stack(obs_log),
        action_rows=np.stack(act_log),
        success=state.success,
        aborted=state.aborted,
        length=state.t,
    )


def expert_chunk_fn(horizon: int = 16):
    def fn(state, _obs_window):
        return scripted_expert(state, horizon)
    return fn


def random_chunk_fn(rng: np.random.Generator, horizon: int = 16, span: float = 1.2):
    """Uniform random pose commands over the workspace; the null baseline."""
    def fn(_state, _obs_window):
        chunk = np.empty((horizon, ACTION_DIM), dtype=np.float32)
        chunk[:, :3] = rng.uniform(-span, span, (horizon, 3))
        chunk[:, 2] = 0.0
        chunk[:, 3:9] = np.tile(np.array([1, 0, 0, 0, 1, 0], np.float32), (horizon, 1))
        chunk[:, 9] = rng.uniform(0.0, 1.0, horizon)
        return chunk
    return fn


def policy_chunk_fn(policy, sched, sample_seed: int, sampler: str = "ddim",
                    k: int = 16):
    """Wrap a trained policy: condition on the observation window, denoise a
    normalized chunk, map it back to workspace commands."""
    rng = np.random.default_rng(sample_seed)

    def fn(_state, obs_window):
        cond = obs_window[None, :, :]  # (1, n_obs, OBS_DIM)
        norm = policy.sample_actions(cond, sched, rng, sampler=sampler, k=k)
        return policy.stats.denormalize_action(norm[0])
    return fn


# ---------------------------------------------------------------------------
# demo collection
# ---------------------------------------------------------------------------

def collect_demos(task: ToyTask, n_demos: int, seed: int, horizon: int = 16,
                  n_obs: int = 2) -> Dataset:
    """Expert demonstrations as sliding-window observation-action pairs.
    Failed episodes are skipped; only successes enter the dataset."""
    if n_demos < 1:
        raise EnvError("n_demos must be at least 1")
    reach = sum(row.a for row in task.chain.rows)
    conds, chunks = [], []
    collected, attempt = 0, 0
    max_attempts = max(20, 4 * n_demos)
    while collected < n_demos:
        if attempt >= max_attempts:
            raise EnvError(
                f"expert failed too often on {task.name}: "
                f"{collected}/{n_demos} after {attempt} attempts")
        ep_seed = demo_seed(seed, attempt)
        attempt += 1
        probe = reset(task, ep_seed)
        if np.linalg.norm(probe.obj_pos) > reach:
            log.info("object unreachable on seed %d; episode skipped", ep_seed)
            continue
        ep = run_episode(task, ep_seed, expert_chunk_fn(horizon), exec_steps=1,
                         n_obs=n_obs)
        if not ep.success or ep.aborted:
            log.info("expert failed on seed %d; episode skipped", ep_seed)
            continue
        cond, chunk = extract_windows(ep.obs_rows, ep.action_rows, n_obs, horizon)
        conds.append(cond)
        chunks.append(chunk)
        collected += 1
    cond = np.concatenate(conds, axis=0)
    actions = np.concatenate(chunks, axis=0)
    stats = NormStats.from_arrays(cond, actions)
    return Dataset(kind="obs", cond=cond, actions=actions, stats=stats, seed=seed)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    checkpoint_sha: str
    n_rollouts: int
    seeds: tuple
    success_per_seed: list
    mean_success: float
    mean_length: float

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise EnvError("n_rollouts must be at least 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise EnvError("seeds must be distinct")
        for r in list(self.success_per_seed) + [self.mean_success]:
            if not 0.0 <= r <= 1.0:
                raise EnvError(f"success rate {r} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "checkpoint_sha": self.checkpoint_sha,
            "n_rollouts": self.n_rollouts,
            "seeds": list(self.seeds),
            "success_per_seed": [float(r) for r in self.success_per_seed],
            "mean_success": float(self.mean_success),
            "mean_length": float(self.mean_length),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(task=d["task"], checkpoint_sha=d["checkpoint_sha"],
                   n_rollouts=int(d["n_rollouts"]), seeds=tuple(d["seeds"]),
                   success_per_seed=list(d["success_per_seed"]),
                   mean_success=float(d["mean_success"]),
                   mean_length=float(d["mean_length"]))


def evaluate_chunks(task: ToyTask, make_chunk_fn, n_rollouts: int, seeds,
                    exec_steps: int = 8, n_obs: int = 2,
                    checkpoint_sha: str = "") -> EvalReport:
    """Shared rollout loop: `make_chunk_fn(seed_value, rollout)` builds the
    controller for one episode. Episodes are independent of one another."""
    if n_rollouts < 1:
        raise EnvError("n_rollouts must be at least 1")
    seeds = tuple(int(s) for s in seeds)
    rates, lengths = [], []
    for s in seeds:
        wins = 0
        for r in range(n_rollouts):
            ep = run_episode(task, eval_seed(s, r), make_chunk_fn(s, r),
                             exec_steps=exec_steps, n_obs=n_obs)
            wins += int(ep.success and not ep.aborted)
            lengths.append(ep.length)
        rates.append(wins / n_rollouts)
    return EvalReport(
        task=task.name,
        checkpoint_sha=checkpoint_sha,
        n_rollouts=n_rollouts,
        seeds=seeds,
        success_per_seed=rates,
        mean_success=float(np.mean(rates)),
        mean_length=float(np.mean(lengths)),
    )


def _checkpoint_sha(source) -> str:
    if isinstance(source, Checkpoint):
        arrays = {k: (v, source.partitions[k]) for k, v in source.params.items()}
        import hashlib

        return hashlib.sha256(checkpoint_bytes(arrays, source.meta)).hexdigest()
    return file_sha256(source)


def evaluate(checkpoint, task: ToyTask, n_rollouts: int = 50,
             seeds=(0, 1, 2), exec_steps: int = 8, sampler: str = "ddim",
             k: int = 16) -> EvalReport:
    """Receding-horizon evaluation of a trained policy checkpoint: predict a
    16-step chunk, execute `exec_steps`, replan. The checkpoint is read, never
    written."""
    sha = _checkpoint_sha(checkpoint)
    policy, sched = policy_from_checkpoint(checkpoint)
    if policy.cond.mode != "obs":
        raise EnvError("checkpoint conditions on joint positions, not observations; "
                       "it cannot be evaluated in the task environment")
    if policy.cond.cond_dim != OBS_DIM:
        raise EnvError(f"checkpoint expects {policy.cond.cond_dim}-dim observations, "
                       f"environment emits {OBS_DIM}")

    def make_fn(seed_value, rollout):
        return policy_chunk_fn(policy, sched, eval_seed(seed_value, rollout),
                               sampler=sampler, k=k)

    return evaluate_chunks(task, make_fn, n_rollouts, seeds,
                           exec_steps=exec_steps, n_obs=policy.cond.n_obs,
                           checkpoint_sha=sha)
