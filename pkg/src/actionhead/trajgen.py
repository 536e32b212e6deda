"""Observation-free training data: smooth joint trajectories labeled with
end-effector actions through forward kinematics.

A trajectory is a minimum-jerk spline through via points sampled from a
family's workspace region, either a joint-space box or a planar task-space
annulus sector (via points then come from rejection-sampling joint configs
whose end-effector lands inside). Each step is labeled with the action
vector ``[position (3), rotation in 6D form (6), gripper openness (1)]``
computed from the same joint configuration, so every label is recomputable
from its source configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, NormStats
from .kinematics import KinChain, forward_kinematics, rotmat_to_rot6d

ACTION_DIM = 10


class TrajGenError(ValueError):
    pass


@dataclass
class JPTrajectory:
    steps: np.ndarray  # (T, DoF) float32
    dt: float
    via_steps: np.ndarray | None = None  # indices of the via points, when known

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float32)
        if self.steps.ndim != 2:
            raise TrajGenError("trajectory steps must be (T, DoF)")
        if not np.all(np.isfinite(self.steps)):
            raise TrajGenError("trajectory contains non-finite joint angles")
        if self.via_steps is not None:
            self.via_steps = np.asarray(self.via_steps, dtype=np.int64)

    def __len__(self) -> int:
        return self.steps.shape[0]


@dataclass
class TaskRegion:
    """Planar annulus sector: end-effector polar angle in phi_range and
    planar radius in r_range. An optional tool_range additionally bands
    the end-effector yaw, which keeps sampled trajectories from sweeping
    the tool orientation while the position moves."""

    phi_range: tuple[float, float]
    r_range: tuple[float, float]
    tool_range: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.phi_range[0] < self.phi_range[1]:
            raise TrajGenError("task region: empty angle range")
        if self.phi_range[1] - self.phi_range[0] > 2 * np.pi:
            raise TrajGenError("task region: angle range wider than a full turn")
        if not 0.0 <= self.r_range[0] < self.r_range[1]:
            raise TrajGenError("task region: bad radius range")
        if self.tool_range is not None:
            if not self.tool_range[0] < self.tool_range[1]:
                raise TrajGenError("task region: empty tool-angle range")
            if self.tool_range[1] - self.tool_range[0] > 2 * np.pi:
                raise TrajGenError("task region: tool-angle range wider than a full turn")

    def contains(self, positions: np.ndarray, yaws: np.ndarray | None = None) -> np.ndarray:
        """Boolean mask for an (N, 3) array of workspace positions. When the
        region bands the tool angle, pass the matching end-effector yaws."""
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        r = np.hypot(p[:, 0], p[:, 1])
        phi = np.arctan2(p[:, 1], p[:, 0])
        mask = ((r >= self.r_range[0]) & (r <= self.r_range[1])
                & (phi >= self.phi_range[0]) & (phi <= self.phi_range[1]))
        if self.tool_range is not None and yaws is not None:
            y = np.asarray(yaws, dtype=np.float64)
            mask &= (y >= self.tool_range[0]) & (y <= self.tool_range[1])
        return mask

    def overlaps(self, other: "TaskRegion") -> bool:
        dphi = (min(self.phi_range[1], other.phi_range[1])
                - max(self.phi_range[0], other.phi_range[0]))
        dr = (min(self.r_range[1], other.r_range[1])
              - max(self.r_range[0], other.r_range[0]))
        return dphi > 0 and dr > 0


@dataclass
class FamilySpec:
    """A workspace region (joint-space box or task-space annulus sector)
    with spline and gripper-event settings."""

    name: str
    q_lo: np.ndarray | None = None
    q_hi: np.ndarray | None = None
    region: TaskRegion | None = None
    via_range: tuple[int, int] = (2, 5)
    duration_range: tuple[float, float] = (0.8, 2.0)
    gripper_event_prob: float = 0.02

    def __post_init__(self):
        has_box = self.q_lo is not None or self.q_hi is not None
        if has_box and self.region is not None:
            raise TrajGenError(f"family {self.name!r}: give a box or a region, not both")
        if not has_box and self.region is None:
            raise TrajGenError(f"family {self.name!r}: needs a joint box or a task region")
        if has_box:
            self.q_lo = np.asarray(self.q_lo, dtype=np.float64)
            self.q_hi = np.asarray(self.q_hi, dtype=np.float64)
            if self.q_lo.shape != self.q_hi.shape:
                raise TrajGenError(f"family {self.name!r}: box bounds disagree in shape")
            if np.any(self.q_lo >= self.q_hi):
                raise TrajGenError(f"family {self.name!r}: empty joint-space box")
        if not 2 <= self.via_range[0] <= self.via_range[1]:
            raise TrajGenError(f"family {self.name!r}: need at least two via points")


def min_jerk_profile(u: np.ndarray) -> np.ndarray:
    """Quintic s(u) = 10u^3 - 15u^4 + 6u^5; zero velocity and acceleration
    at both ends, peak slope 15/8 at the midpoint."""
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def _region_vias(chain: KinChain, region: TaskRegion, rng: np.random.Generator,
                 n_via: int, name: str) -> np.ndarray:
    """Rejection-sample joint configs whose end-effector position lands in
    the region. The first via comes from the whole joint-limit box; each
    later via is drawn near its predecessor so the connecting spline stays
    close to the region instead of swinging across the workspace."""
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]

    def accepted(center, width):
        box_lo = np.maximum(lo, center - width)
        box_hi = np.minimum(hi, center + width)
        qs = rng.uniform(box_lo, box_hi, size=(256, chain.dof))
        poses = [forward_kinematics(chain, q) for q in qs]
        ps = np.array([pose.p for pose in poses])
        yaws = np.array([np.arctan2(pose.R[1, 0], pose.R[0, 0]) for pose in poses])
        hits = qs[region.contains(ps, yaws)]
        return hits[0] if len(hits) else None

    found = []
    width = np.max(hi - lo)
    for _ in range(200):
        q = accepted(np.full(chain.dof, 0.0) if not found else found[-1], width)
        if q is None:
            width = width * 1.5 if found else width
            continue
        found.append(q)
        width = 0.9
        if len(found) == n_via:
            return np.array(found)
    raise TrajGenError(f"family {name!r}: task region is unreachable for this chain")


def sample_trajectory(chain: KinChain, family: FamilySpec, rng: np.random.Generator,
                      dt: float = 0.1) -> JPTrajectory:
    """Minimum-jerk spline through uniform via points from the family's
    joint box (clipped to the chain's joint limits) or task-space region."""
    n_via = int(rng.integers(family.via_range[0], family.via_range[1] + 1))
    if family.region is not None:
        vias = _region_vias(chain, family.region, rng, n_via, family.name)
    else:
        if family.q_lo.shape != (chain.dof,):
            raise TrajGenError(
                f"family {family.name!r} is {family.q_lo.shape[0]}-dof, chain has {chain.dof}"
            )
        lo = np.maximum(family.q_lo, chain.joint_limits[:, 0])
        hi = np.minimum(family.q_hi, chain.joint_limits[:, 1])
        if np.any(lo > hi):
            raise TrajGenError(f"family {family.name!r} box lies outside the joint limits")
        vias = rng.uniform(lo, hi, size=(n_via, chain.dof))
    durations = rng.uniform(*family.duration_range, size=n_via - 1)
    return interpolate_via_points(vias, durations, dt)


def interpolate_via_points(vias: np.ndarray, durations, dt: float) -> JPTrajectory:
    """Chain minimum-jerk segments through the via points; every via point
    appears exactly in the output and segment endpoint velocities are zero."""
    vias = np.asarray(vias, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.float64)
    if len(durations) != len(vias) - 1:
        raise TrajGenError("need one duration per via-point segment")
    segments = [vias[0][None, :]]
    via_steps = [0]
    for a, b, t_seg in zip(vias[:-1], vias[1:], durations):
        n_steps = max(2, int(round(t_seg / dt)))
        u = np.arange(1, n_steps + 1) / n_steps
        s = min_jerk_profile(u)
        segments.append(a[None, :] + s[:, None] * (b - a)[None, :])
        via_steps.append(via_steps[-1] + n_steps)
    return JPTrajectory(steps=np.concatenate(segments, axis=0), dt=dt,
                        via_steps=np.array(via_steps))


def sample_gripper_events(rng: np.random.Generator, length: int, event_prob: float,
                          via_steps: np.ndarray | None = None) -> list:
    """Random open/close switches: list of (step_index, value) pairs.

    When via indices are given, switch opportunities sit at the via arrivals
    (where the arm decelerates to a stop), so upcoming switches correlate
    with the motion the way grasp and release events do. Otherwise every
    step is an opportunity.
    """
    if via_steps is not None:
        chances = [int(t) for t in via_steps if 0 < t < length - 1]
    else:
        chances = list(range(1, length))
    events = []
    state = 1.0
    for t in chances:
        if rng.random() < event_prob:
            state = 1.0 - state
            events.append((t, state))
    return events


def label_with_fk(chain: KinChain, traj: JPTrajectory, gripper_events=()) -> np.ndarray:
    """Per-step action labels [p (3), rot6d (6), gripper (1)].

    The gripper channel starts open (1.0) and is piecewise constant,
    switching at the given (step_index, value) events.
    """
    t_len = len(traj)
    labels = np.empty((t_len, ACTION_DIM), dtype=np.float64)
    q64 = traj.steps.astype(np.float64)
    for t in range(t_len):
        pose = forward_kinematics(chain, q64[t])
        labels[t, :3] = pose.p
        labels[t, 3:9] = rotmat_to_rot6d(pose.R)
    grip = np.full(t_len, 1.0)
    for t_ev, value in sorted(gripper_events):
        if not 0 <= t_ev < t_len:
            raise TrajGenError(f"gripper event index {t_ev} outside trajectory")
        if value not in (0.0, 1.0):
            raise TrajGenError(f"gripper event value must be 0 or 1, got {value}")
        grip[t_ev:] = value
    labels[:, 9] = grip
    return labels.astype(np.float32)


def extract_windows(cond_rows: np.ndarray, action_rows: np.ndarray, n_obs: int,
                    horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 sliding windows: conditioning rows end at the chunk's first
    step; chunks overrunning the end repeat the final action row.

    Yields T - n_obs + 1 windows for a length-T sequence.
    """
    t_len = cond_rows.shape[0]
    if t_len < n_obs:
        raise TrajGenError(f"sequence of length {t_len} too short for n_obs={n_obs}")
    padded = np.concatenate(
        [action_rows, np.repeat(action_rows[-1:], horizon, axis=0)], axis=0
    )
    n_win = t_len - n_obs + 1
    cond = np.empty((n_win, n_obs, cond_rows.shape[1]), dtype=np.float32)
    chunks = np.empty((n_win, horizon, action_rows.shape[1]), dtype=np.float32)
    for w in range(n_win):
        start = w + n_obs - 1  # chunk begins at the window's last row
        cond[w] = cond_rows[w : w + n_obs]
        chunks[w] = padded[start : start + horizon]
    return cond, chunks


def build_dataset(chain: KinChain, families: list, n_trajs: int, horizon: int = 16,
                  n_obs: int = 2, seed: int = 0, dt: float = 0.1) -> Dataset:
    """Observation-free dataset: joint-window conditioning, action-chunk
    targets. Deterministic given the seed (per-trajectory child streams)."""
    if n_trajs <= 0:
        raise TrajGenError("n_trajs must be positive")
    if horizon < 1 or n_obs < 1:
        raise TrajGenError("horizon and n_obs must be at least 1")
    if not families:
        raise TrajGenError("need at least one trajectory family")
    streams = np.random.SeedSequence(seed).spawn(n_trajs)
    all_cond, all_chunks = [], []
    for i in range(n_trajs):
        rng = np.random.default_rng(streams[i])
        family = families[i % len(families)]
        traj = sample_trajectory(chain, family, rng, dt=dt)
        events = sample_gripper_events(rng, len(traj), family.gripper_event_prob,
                                       via_steps=traj.via_steps)
        labels = label_with_fk(chain, traj, events)
        cond, chunks = extract_windows(traj.steps, labels, n_obs, horizon)
        all_cond.append(cond)
        all_chunks.append(chunks)
    cond = np.concatenate(all_cond, axis=0)
    actions = np.concatenate(all_chunks, axis=0)
    stats = NormStats.from_arrays(cond, actions)
    return Dataset(kind="jp", cond=cond, actions=actions, stats=stats, seed=seed)


def family_presets() -> dict[str, FamilySpec]:
    """Eight planar-arm families over task-space annulus sectors: three
    jointly covering an in-distribution band (pairwise overlapping), five
    extending partly beyond it in angle or radius. All presets band the
    tool angle near zero and toggle the gripper at via arrivals, so the
    chunks look like manipulation motion: the hand translates with a
    steady orientation and grips where it stops."""

    def spec(name, phi, r):
        region = TaskRegion(phi_range=phi, r_range=r, tool_range=(-0.35, 0.35))
        return FamilySpec(name=name, region=region,
                          via_range=(3, 6), duration_range=(1.0, 2.4),
                          gripper_event_prob=0.75)

    return {
        "IN_A": spec("IN_A", (-0.10, 1.80), (0.40, 1.15)),
        "IN_C": spec("IN_C", (-0.95, 0.95), (0.40, 1.15)),
        "IN_G": spec("IN_G", (-1.80, 0.10), (0.40, 1.15)),
        "OUT_B": spec("OUT_B", (1.10, 2.60), (0.40, 1.15)),
        "OUT_D": spec("OUT_D", (-2.60, -1.10), (0.40, 1.15)),
        "OUT_E": spec("OUT_E", (-1.20, 1.20), (0.18, 0.70)),
        "OUT_F": spec("OUT_F", (-2.20, 2.20), (0.90, 1.19)),
        "OUT_H": spec("OUT_H", (-0.70, 0.70), (0.30, 1.19)),
    }


def in_distribution_families() -> list[FamilySpec]:
    presets = family_presets()
    return [presets["IN_A"], presets["IN_C"], presets["IN_G"]]
