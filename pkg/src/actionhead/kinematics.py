"""Serial-arm forward kinematics over DH chains, plus rotation conversions.

All operations are pure functions on float64 numpy arrays. Chains are loaded
from JSON presets (convention, rows, tool transform, joint limits); the
planar presets are analytically checkable, the 7-DoF preset ships as
configuration data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

CONVENTIONS = ("classic", "modified")


class KinematicsError(ValueError):
    pass


@dataclass(frozen=True)
class DHRow:
    a: float
    d: float
    alpha: float
    theta_offset: float = 0.0

    def __post_init__(self):
        vals = (self.a, self.d, self.alpha, self.theta_offset)
        if not all(math.isfinite(v) for v in vals):
            raise KinematicsError(f"non-finite DH row: {vals}")


@dataclass
class KinChain:
    rows: list[DHRow]
    convention: str = "classic"
    tool: np.ndarray = field(default_factory=lambda: np.eye(4))
    joint_limits: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise KinematicsError(f"unknown DH convention {self.convention!r}")
        self.tool = np.asarray(self.tool, dtype=np.float64)
        if self.tool.shape != (4, 4):
            raise KinematicsError(f"tool transform must be 4x4, got {self.tool.shape}")
        if self.joint_limits is None:
            self.joint_limits = np.tile([-np.pi, np.pi], (len(self.rows), 1)).astype(np.float64)
        self.joint_limits = np.asarray(self.joint_limits, dtype=np.float64)
        if self.joint_limits.shape != (len(self.rows), 2):
            raise KinematicsError("joint_limits must be (DoF, 2)")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise KinematicsError("joint_limits require lo < hi per joint")

    @property
    def dof(self) -> int:
        return len(self.rows)


@dataclass
class Pose:
    p: np.ndarray
    R: np.ndarray

    def validate(self, tol: float = 1e-9) -> "Pose":
        err = np.max(np.abs(self.R.T @ self.R - np.eye(3)))
        if err > tol:
            raise KinematicsError(f"rotation block not orthonormal (err {err:.2e})")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise KinematicsError("rotation block has det != +1")
        return self


def dh_transform(row: DHRow, q_i: float, convention: str = "classic") -> np.ndarray:
    """Homogeneous transform contributed by one revolute joint.

    classic:  RotZ(theta) TransZ(d) TransX(a) RotX(alpha)
    modified: RotX(alpha) TransX(a) RotZ(theta) TransZ(d)
    with theta = theta_offset + q_i.
    """
    th = row.theta_offset + q_i
    ct, st = math.cos(th), math.sin(th)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    if convention == "classic":
        return np.array(
            [
                [ct, -st * ca, st * sa, row.a * ct],
                [st, ct * ca, -ct * sa, row.a * st],
                [0.0, sa, ca, row.d],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
    if convention == "modified":
        return np.array(
            [
                [ct, -st, 0.0, row.a],
                [st * ca, ct * ca, -sa, -row.d * sa],
                [st * sa, ct * sa, ca, row.d * ca],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
    raise KinematicsError(f"unknown DH convention {convention!r}")


def fk_transform(chain: KinChain, q) -> np.ndarray:
    """Ordered left-to-right chain product times the tool transform."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (chain.dof,):
        raise KinematicsError(f"expected {chain.dof} joint angles, got shape {q.shape}")
    t = np.eye(4)
    for row, qi in zip(chain.rows, q):
        t = t @ dh_transform(row, float(qi), chain.convention)
    return t @ chain.tool


def forward_kinematics(chain: KinChain, q) -> Pose:
    t = fk_transform(chain, q)
    return Pose(p=t[:3, 3].copy(), R=t[:3, :3].copy())


# ---------------------------------------------------------------------------
# rotation representations
# ---------------------------------------------------------------------------

def rotmat_to_rot6d(r: np.ndarray) -> np.ndarray:
    """First two columns of R, flattened to 6 floats."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise KinematicsError(f"expected 3x3 rotation, got {r.shape}")
    return np.concatenate([r[:, 0], r[:, 1]])


def rot6d_to_rotmat(r6: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt reconstruction; scale-invariant in its input."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape != (6,):
        raise KinematicsError(f"expected 6 floats, got shape {r6.shape}")
    c1, c2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(c1)
    if n1 < tol:
        raise KinematicsError("degenerate 6D rotation: first column near zero")
    b1 = c1 / n1
    c2p = c2 - np.dot(b1, c2) * b1
    n2 = np.linalg.norm(c2p)
    if n2 < tol:
        raise KinematicsError("degenerate 6D rotation: columns near parallel")
    b2 = c2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 (ties broken toward a
    positive first nonzero vector part)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise KinematicsError(f"expected 3x3 rotation, got {r.shape}")
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
    q = q / np.linalg.norm(q)
    return canonicalize_quat(q)


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        return -q
    if q[0] == 0.0:
        for v in q[1:]:
            if v != 0.0:
                return q if v > 0 else -q
    return q


def quat_to_rotmat(q: np.ndarray, unit_tol: float = 1e-3) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise KinematicsError(f"expected quaternion (w,x,y,z), got shape {q.shape}")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > unit_tol:
        raise KinematicsError(f"quaternion norm {n:.6f} too far from 1")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def chain_from_dict(cfg: dict, name: str = "") -> KinChain:
    try:
        rows = [
            DHRow(
                a=float(r["a"]),
                d=float(r["d"]),
                alpha=float(r["alpha"]),
                theta_offset=float(r.get("theta_offset", 0.0)),
            )
            for r in cfg["rows"]
        ]
        convention = cfg.get("convention", "classic")
        tool = np.asarray(cfg.get("tool", np.eye(4).tolist()), dtype=np.float64)
        limits = cfg.get("joint_limits")
    except (KeyError, TypeError, ValueError) as e:
        raise KinematicsError(f"malformed chain config: {e}") from None
    return KinChain(
        rows=rows,
        convention=convention,
        tool=tool,
        joint_limits=np.asarray(limits, dtype=np.float64) if limits is not None else None,
        name=name or cfg.get("name", ""),
    )


def load_chain(source) -> KinChain:
    """Load a chain from a preset name ('planar2', 'planar3', 'franka') or a
    JSON file path."""
    src = str(source)
    if src.endswith(".json") or "/" in src:
        path = Path(src)
        if not path.exists():
            raise KinematicsError(f"chain config not found: {path}")
        text = path.read_text()
        name = path.stem
    else:
        ref = resources.files("actionhead").joinpath(f"presets/{src}.json")
        if not ref.is_file():
            raise KinematicsError(f"unknown chain preset {src!r}")
        text = ref.read_text()
        name = src
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise KinematicsError(f"chain config is not valid JSON: {e}") from None
    return chain_from_dict(cfg, name=name)


def planar_chain(lengths, name: str = "planar") -> KinChain:
    """All-zero twist chain in the xy plane; FK reduces to angle sums."""
    rows = [DHRow(a=float(l), d=0.0, alpha=0.0) for l in lengths]
    return KinChain(rows=rows, convention="classic", name=name)
