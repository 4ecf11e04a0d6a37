"""Motion representation, 6D rotations, skeleton forward kinematics.

A dancer frame is packed as ``[contact(4), root(3), pose(144)]`` (151 values).
The pose holds one 6D block per joint: the first two columns of the joint's
local rotation matrix, column 1 then column 2.

The numeric kernels are written against torch so the diffusion losses can
differentiate through them; every public function also accepts numpy arrays
and hands numpy back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

NUM_JOINTS = 24
CONTACT_DIM = 4
ROOT_DIM = 3
POSE_DIM = NUM_JOINTS * 6
FRAME_DIM = CONTACT_DIM + ROOT_DIM + POSE_DIM  # 151

CONTACT = slice(0, 4)
ROOT = slice(4, 7)
POSE = slice(7, FRAME_DIM)


class DimensionError(ValueError):
    pass


class DegenerateRotationError(ValueError):
    pass


def _to_torch(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.ascontiguousarray(x, dtype=np.float64)), True


def _back(x: torch.Tensor, was_numpy: bool):
    return x.detach().numpy() if was_numpy else x


# ---------------------------------------------------------------------------
# frames and sequences


@dataclass(frozen=True)
class MotionFrame:
    """One dancer at one frame."""

    contact: np.ndarray
    root: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        for name, n in (("contact", CONTACT_DIM), ("root", ROOT_DIM), ("pose", POSE_DIM)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise DimensionError(f"{name} must have {n} values, got shape {arr.shape}")
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls) -> "MotionFrame":
        return cls(np.zeros(CONTACT_DIM), np.zeros(ROOT_DIM), np.zeros(POSE_DIM))

    def __eq__(self, other):
        if not isinstance(other, MotionFrame):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("contact", "root", "pose")
        )


def pack(frame: MotionFrame) -> np.ndarray:
    return np.concatenate([frame.contact, frame.root, frame.pose])


def unpack(vector) -> MotionFrame:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (FRAME_DIM,):
        raise DimensionError(f"expected a {FRAME_DIM}-vector, got shape {v.shape}")
    return MotionFrame(v[CONTACT].copy(), v[ROOT].copy(), v[POSE].copy())


@dataclass
class GroupMotionSequence:
    """``data`` has shape (C, L, 151); every dancer shares L and fps."""

    data: np.ndarray
    fps: float

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[-1] != FRAME_DIM:
            raise DimensionError(f"group motion must be (C, L, {FRAME_DIM}), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionError("need at least one dancer and one frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def dancers(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def contact(self) -> np.ndarray:
        return self.data[..., CONTACT]

    @property
    def root(self) -> np.ndarray:
        return self.data[..., ROOT]

    @property
    def pose(self) -> np.ndarray:
        return self.data[..., POSE]

    def frame(self, dancer: int, index: int) -> MotionFrame:
        return unpack(self.data[dancer, index])


# ---------------------------------------------------------------------------
# skeleton


@dataclass(frozen=True, eq=False)
class Skeleton:
    parent: tuple[int, ...]
    offsets: np.ndarray
    foot_joints: tuple[int, ...]
    lower_body: frozenset[int]
    _offsets_t: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        n = len(self.parent)
        if offsets.shape != (n, 3):
            raise DimensionError(f"offsets must be ({n}, 3), got {offsets.shape}")
        if n < 1 or self.parent[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            # parents listed before children gives a single tree rooted at 0
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"joint {j} has invalid parent {self.parent[j]}")
        if not set(self.foot_joints) <= set(self.lower_body):
            raise ValueError("foot joints must belong to the lower body")
        if any(not 0 < j < n for j in self.lower_body):
            raise ValueError("lower-body joints must be non-root joint indices")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "_offsets_t", torch.as_tensor(offsets))

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    def children(self, joint: int) -> list[int]:
        return [j for j, p in enumerate(self.parent) if p == joint]

    def descendants(self, joint: int) -> set[int]:
        out: set[int] = set()
        stack = self.children(joint)
        while stack:
            j = stack.pop()
            out.add(j)
            stack.extend(self.children(j))
        return out

    def to_text(self) -> str:
        lines = [
            f"{j} {p} {o[0]:.6f} {o[1]:.6f} {o[2]:.6f}"
            for j, (p, o) in enumerate(zip(self.parent, self.offsets))
        ]
        lines.append("foot_joints " + " ".join(map(str, self.foot_joints)))
        lines.append("lower_body " + " ".join(map(str, sorted(self.lower_body))))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Skeleton":
        rows: list[tuple[int, int, float, float, float]] = []
        feet: tuple[int, ...] | None = None
        lower: frozenset[int] | None = None
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            if head == "foot_joints":
                feet = tuple(int(v) for v in rest)
            elif head == "lower_body":
                lower = frozenset(int(v) for v in rest)
            else:
                if len(rest) != 4:
                    raise ValueError(f"bad skeleton line: {raw!r}")
                rows.append((int(head), int(rest[0]), *map(float, rest[1:])))
        if feet is None or lower is None:
            raise ValueError("skeleton file must list foot_joints and lower_body")
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError("joint indices must be 0..n-1")
        return cls(
            parent=tuple(r[1] for r in rows),
            offsets=np.array([r[2:] for r in rows]),
            foot_joints=feet,
            lower_body=lower,
        )


def load_skeleton(path: str | Path | None = None) -> Skeleton:
    """Load a skeleton file; with no path, the bundled 24-joint SMPL table."""
    if path is None:
        text = resources.files("groupchoreo").joinpath("data/skeleton_smpl24.txt").read_text()
    else:
        text = Path(path).read_text()
    return Skeleton.from_text(text)


# ---------------------------------------------------------------------------
# 6D rotations


def _rot6d_to_matrix(r: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    with torch.no_grad():
        if bool((n1 <= eps).any()):
            raise DegenerateRotationError("first 6D column is zero")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    with torch.no_grad():
        scale = torch.linalg.vector_norm(a2, dim=-1, keepdim=True)
        if bool((n2 <= eps * torch.clamp(scale, min=1.0)).any()):
            raise DegenerateRotationError("6D columns are parallel or the second is zero")
    b2 = u2 / n2
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def rot6d_to_matrix(r):
    """Map (..., 6) blocks to (..., 3, 3) rotation matrices by Gram-Schmidt."""
    t, was_np = _to_torch(r)
    if t.shape[-1] != 6:
        raise DimensionError(f"6D rotations need a trailing axis of 6, got {tuple(t.shape)}")
    return _back(_rot6d_to_matrix(t), was_np)


def matrix_to_rot6d(R, tol: float = 1e-6):
    t, was_np = _to_torch(R)
    if t.shape[-2:] != (3, 3):
        raise DimensionError(f"expected (..., 3, 3) matrices, got {tuple(t.shape)}")
    with torch.no_grad():
        eye = torch.eye(3, dtype=t.dtype)
        err = (t.transpose(-1, -2) @ t - eye).abs().amax() if t.numel() else torch.tensor(0.0)
        if float(err) > tol or bool((torch.linalg.det(t) <= 0).any()):
            raise ValueError(f"matrix is not a proper rotation (orthonormality error {float(err):.3g})")
    return _back(torch.cat([t[..., :, 0], t[..., :, 1]], dim=-1), was_np)


def axis_angle_matrix(axis: Sequence[float], angle) -> np.ndarray:
    """Rodrigues rotation; ``angle`` may be an array, giving (..., 3, 3)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    a = np.asarray(angle, dtype=np.float64)[..., None, None]
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)


def identity_pose(*lead: int) -> np.ndarray:
    block = np.array([1.0, 0, 0, 0, 1, 0])
    return np.broadcast_to(np.tile(block, NUM_JOINTS), (*lead, POSE_DIM)).copy()


# ---------------------------------------------------------------------------
# kinematics


def _fk(skeleton: Skeleton, pose: torch.Tensor, root: torch.Tensor) -> torch.Tensor:
    J = skeleton.num_joints
    local = _rot6d_to_matrix(pose.reshape(*pose.shape[:-1], J, 6))
    offsets = skeleton._offsets_t.to(pose.dtype)
    rots = [local[..., 0, :, :]]
    pos = [root]
    for j in range(1, J):
        p = skeleton.parent[j]
        pos.append(pos[p] + rots[p] @ offsets[j])
        rots.append(rots[p] @ local[..., j, :, :])
    return torch.stack(pos, dim=-2)


def forward_kinematics(skeleton: Skeleton, pose, root):
    """Joint positions (..., J, 3) from 6D local rotations (..., J*6) and root (..., 3)."""
    pose_t, was_np = _to_torch(pose)
    root_t, _ = _to_torch(root)
    if pose_t.shape[-1] != skeleton.num_joints * 6 or root_t.shape[-1] != 3:
        raise DimensionError("pose must end in J*6 values and root in 3")
    return _back(_fk(skeleton, pose_t, root_t.to(pose_t.dtype)), was_np)


def motion_joint_positions(skeleton: Skeleton, motion):
    """FK applied to packed 151-vectors (..., 151) -> (..., J, 3)."""
    m, was_np = _to_torch(motion)
    if m.shape[-1] != FRAME_DIM:
        raise DimensionError(f"packed motion must end in {FRAME_DIM} values")
    return _back(_fk(skeleton, m[..., POSE], m[..., ROOT]), was_np)


def joint_velocities(positions, fps: float):
    """Backward differences along the frame axis (-3), scaled to m/s; v_0 copies v_1."""
    x, was_np = _to_torch(positions)
    if x.ndim < 3 or x.shape[-3] < 2:
        raise DimensionError("need at least two frames of (..., L, J, 3) positions")
    d = (x[..., 1:, :, :] - x[..., :-1, :, :]) * fps
    return _back(torch.cat([d[..., :1, :, :], d], dim=-3), was_np)


# ---------------------------------------------------------------------------
# upper/lower split and contacts


def lower_channel_mask(skeleton: Skeleton) -> np.ndarray:
    """Boolean mask over the 151 channels taken from the adapted motion."""
    mask = np.zeros(FRAME_DIM, dtype=bool)
    mask[CONTACT] = True
    for j in skeleton.lower_body:
        mask[POSE.start + 6 * j : POSE.start + 6 * j + 6] = True
    return mask


def merge_footwork(raw, adapted, skeleton: Skeleton):
    """Upper-body pose and root from ``raw``; lower-body pose and contacts from ``adapted``."""
    if tuple(raw.shape) != tuple(adapted.shape):
        raise DimensionError(f"shape mismatch {tuple(raw.shape)} vs {tuple(adapted.shape)}")
    if raw.shape[-1] != FRAME_DIM:
        raise DimensionError(f"packed motion must end in {FRAME_DIM} values")
    mask = lower_channel_mask(skeleton)
    if isinstance(raw, torch.Tensor):
        return torch.where(torch.as_tensor(mask), adapted, raw)
    return np.where(mask, adapted, raw)


def compute_contact_labels(
    positions,
    skeleton: Skeleton,
    fps: float,
    height_thresh: float = 0.08,
    speed_thresh: float = 0.2,
) -> np.ndarray:
    """(L, J, 3) positions -> (L, 4) binary labels, ordered as ``skeleton.foot_joints``."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 3 or pos.shape[0] < 2:
        raise DimensionError("need (L >= 2, J, 3) positions")
    feet = list(skeleton.foot_joints)
    speed = np.linalg.norm(joint_velocities(pos, fps)[:, feet], axis=-1)
    height = pos[:, feet, 1]
    return ((height < height_thresh) & (speed < speed_thresh)).astype(np.float64)
