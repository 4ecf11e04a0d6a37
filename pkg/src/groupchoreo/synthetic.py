"""Synthetic group choreography with its own ground truth.

Each sample is a click track, its music features, group motion and root
trajectories. Annotations record what the generator knows by construction:
beat frames, crossing windows, per-foot stance schedule, and which joints
move. Dancers face +z; legs are posed with analytic two-bone IK so that
planted feet stay exactly fixed while the root travels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import audio
from . import motion as mc
from .dbn import TrajectorySequence

ROOT_HEIGHT = 0.86
ANKLE_HEIGHT = 0.055
STEP_LIFT = 0.12
MIN_CLEARANCE = 0.6

FORMATIONS = ("line", "circle", "vee")
MANEUVERS = ("hold", "rotate", "swap", "cross")

L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE = 1, 2, 4, 5, 7, 8
SPINE3, NECK, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW = 9, 12, 16, 17, 18, 19


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    dancers: int = 2
    frames: int = 30
    fps: float = 30.0
    bpm: float = 120.0
    formation: str = "circle"
    maneuver: str = "rotate"
    limb_amplitude: float = 0.5
    seed: int = 0
    spacing: float = 1.5  # nearest-neighbour distance of the formation, m
    speed: float = 0.25  # travel speed for rotate/swap/cross, m/s
    direction: int = 1  # rotate: +1 counter-clockwise seen from above
    start_angle: float = 0.0
    first_beat_frame: int | None = None
    stepping: bool = True
    stage_radius: float = 4.0
    sample_rate: int = 22050
    collision_radius: float = 0.2

    def validate(self) -> None:
        if self.dancers < 1:
            raise ValueError("need at least one dancer")
        if not 60 <= self.bpm <= 180:
            raise ValueError("bpm must lie in [60, 180]")
        if self.formation not in FORMATIONS:
            raise ValueError(f"formation must be one of {FORMATIONS}")
        if self.maneuver not in MANEUVERS:
            raise ValueError(f"maneuver must be one of {MANEUVERS}")
        if self.frames < 2 or self.fps <= 0:
            raise ValueError("need at least 2 frames and positive fps")
        if self.maneuver in ("swap", "cross") and self.dancers < 2:
            raise ValueError(f"{self.maneuver} needs at least two dancers")


@dataclass
class SyntheticSample:
    spec: SyntheticSpec
    clip: audio.AudioClip
    music: audio.MusicFeatureSequence
    motion: mc.GroupMotionSequence
    trajectory: TrajectorySequence
    annotations: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# trajectories


def formation_positions(kind: str, C: int, spacing: float) -> np.ndarray:
    """(C, 2) ground-plane (x, z) slots centred on the origin."""
    if kind == "line":
        xs = (np.arange(C) - (C - 1) / 2) * spacing
        return np.stack([xs, np.zeros(C)], axis=1)
    if kind == "circle":
        if C == 1:
            return np.zeros((1, 2))
        r = spacing / (2 * math.sin(math.pi / C))
        ang = 2 * math.pi * np.arange(C) / C
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    if kind == "vee":
        theta = math.radians(35.0)
        pts = [(0.0, 0.0)]
        for k in range(1, C):
            m = (k + 1) // 2
            side = 1 if k % 2 else -1
            pts.append((side * m * spacing * math.sin(theta), -m * spacing * math.cos(theta)))
        pts = np.array(pts)
        return pts - pts.mean(axis=0)
    raise ValueError(f"unknown formation {kind!r}")


def _ground_path(spec: SyntheticSpec, base: np.ndarray, times: np.ndarray) -> np.ndarray:
    """(C, len(times), 2) ground positions; times beyond the clip are clamped for swap/cross."""
    C = base.shape[0]
    duration = (spec.frames - 1) / spec.fps
    out = np.repeat(base[:, None, :], times.size, axis=1)
    if spec.maneuver == "rotate":
        radius = max(np.linalg.norm(base, axis=1).max(), 1e-9)
        omega = spec.direction * spec.speed / radius if radius > 1e-6 else 0.0
        ang = spec.start_angle + omega * times
        c, s = np.cos(ang), np.sin(ang)
        out = np.stack([c * base[:, None, 0] - s * base[:, None, 1], s * base[:, None, 0] + c * base[:, None, 1]], axis=-1)
    elif spec.maneuver == "swap":
        u = np.clip(times / duration, 0, 1)
        s = u * u * (3 - 2 * u)
        mid = (base[0] + base[1]) / 2
        half = (base[0] - base[1]) / 2
        ang = math.pi * s
        rot = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        perp = np.array([-half[1], half[0]])
        offs = rot[:, :1] * half + rot[:, 1:] * perp
        out[0] = mid + offs
        out[1] = mid - offs
    elif spec.maneuver == "cross":
        u = np.clip(times / duration, 0, 1)[:, None]
        out[0] = base[0] + (base[1] - base[0]) * u
        out[1] = base[1] + (base[0] - base[1]) * u
    if spec.start_angle and spec.maneuver != "rotate":
        c, s = math.cos(spec.start_angle), math.sin(spec.start_angle)
        out = np.stack([c * out[..., 0] - s * out[..., 1], s * out[..., 0] + c * out[..., 1]], axis=-1)
    return out


def pairwise_ground_distances(roots: np.ndarray) -> np.ndarray:
    """(C, L, 3) roots -> (npairs, L) ground-plane distances."""
    C = roots.shape[0]
    i, j = np.triu_indices(C, k=1)
    d = roots[i][..., [0, 2]] - roots[j][..., [0, 2]]
    return np.linalg.norm(d, axis=-1)


# ---------------------------------------------------------------------------
# bodies


def _leg_ik(hip: np.ndarray, target: np.ndarray, l1: float, l2: float):
    """Global thigh/shin frames (N, 3, 3) for a knee that bends forward (+z)."""
    r = target - hip
    D = np.linalg.norm(r, axis=-1, keepdims=True)
    D_c = np.clip(D, abs(l1 - l2) + 1e-6, (l1 + l2) * 0.9999)
    u = r / D
    fwd = np.array([0.0, 0.0, 1.0])
    w = fwd - (u @ fwd)[:, None] * u
    w /= np.linalg.norm(w, axis=-1, keepdims=True)
    cos_a = np.clip((l1**2 + D_c**2 - l2**2) / (2 * l1 * D_c), -1, 1)
    sin_a = np.sqrt(1 - cos_a**2)
    knee = hip + l1 * (cos_a * u + sin_a * w)
    ankle = hip + D_c * u
    a = (knee - hip) / l1
    b = (ankle - knee) / l2
    h = np.cross(w, u)
    h /= np.linalg.norm(h, axis=-1, keepdims=True)

    def frame(bone):
        y = -bone
        return np.stack([h, y, np.cross(h, y)], axis=-1)

    return frame(a), frame(b)


def _beat_times(spec: SyntheticSpec, first_beat_frame: int) -> np.ndarray:
    duration = spec.frames / spec.fps
    return np.arange(first_beat_frame / spec.fps, duration, 60.0 / spec.bpm)


def _foot_schedule(spec, ground_fn, hip_dx, beat_times, dancer_phase):
    """Per-foot ankle targets (2, L, 3) and stance flags (2, L) for one dancer."""
    L, fps = spec.frames, spec.fps
    period = 60.0 / spec.bpm
    n_swing = max(3, min(int(round(0.2 * fps)), int(period * fps) - 2))
    times = np.arange(L) / fps
    feet = np.zeros((2, L, 3))
    stance = np.ones((2, L), dtype=bool)
    for f, dx in enumerate(hip_dx):
        def neutral(t):
            g = ground_fn(np.atleast_1d(t))[0, 0]
            return np.array([g[0] + dx, ANKLE_HEIGHT, g[1]])

        plant = neutral(0.0)
        swings = []
        if spec.stepping:
            for k, tb in enumerate(beat_times):
                if (k + dancer_phase) % 2 != f:
                    continue
                start = int(math.ceil(tb * fps - 1e-9))
                swings.append(start)
        pos = np.repeat(plant[None], L, axis=0)
        current = plant
        last_end = -1
        for start in swings:
            end = start + n_swing
            if start <= last_end:
                continue
            land_time = end / fps
            stance_mid = land_time + max(2 * period - n_swing / fps, 0.0) / 2
            target = neutral(stance_mid)
            for i in range(max(start, 0), min(end + 1, L)):
                s = (i - start) / n_swing
                sm = s * s * (3 - 2 * s)
                if i == end:
                    pos[i] = target
                else:
                    pos[i] = current + (target - current) * sm
                    pos[i, 1] = ANKLE_HEIGHT + STEP_LIFT * math.sin(math.pi * s)
            if end + 1 < L:
                pos[end + 1 :] = target
            current = target
            last_end = end
        feet[f] = pos
    moved = np.zeros((2, L), dtype=bool)
    moved[:, 1:] = np.any(feet[:, 1:] != feet[:, :-1], axis=-1)
    moved[:, 0] = moved[:, 1]
    stance = ~moved
    return feet, stance


def _upper_body(spec: SyntheticSpec, times: np.ndarray, beat0: float, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Beat-locked local rotations (L, 3, 3) for spine, neck, shoulders and elbows."""
    amp = spec.limb_amplitude * rng.uniform(0.85, 1.15)
    lag = rng.uniform(-0.05, 0.05)
    phase = (times - beat0) * spec.bpm / 60.0 + lag
    two_pi = 2 * math.pi
    rot = mc.axis_angle_matrix
    out = {
        SPINE3: rot((1, 0, 0), 0.15 * amp * np.sin(two_pi * phase)),
        NECK: rot((1, 0, 0), 0.3 * amp * np.sin(two_pi * phase)),
        L_SHOULDER: rot((0, 0, 1), -1.0 + amp * np.sin(math.pi * phase)),
        R_SHOULDER: rot((0, 0, 1), 1.0 - amp * np.sin(math.pi * phase)),
        L_ELBOW: rot((0, 1, 0), amp * (0.5 + 0.5 * np.sin(two_pi * phase))),
        R_ELBOW: rot((0, 1, 0), -amp * (0.5 + 0.5 * np.sin(two_pi * phase))),
    }
    return out


def _dancer_motion(spec, skeleton, ground_fn, beat_times, beat0, rng, dancer_phase):
    L = spec.frames
    times = np.arange(L) / spec.fps
    ground = ground_fn(times)[0]
    root = np.stack([ground[:, 0], np.full(L, ROOT_HEIGHT), ground[:, 1]], axis=1)
    hip_dx = (skeleton.offsets[L_HIP, 0], skeleton.offsets[R_HIP, 0])
    feet, stance = _foot_schedule(spec, ground_fn, hip_dx, beat_times, dancer_phase)

    local = np.broadcast_to(np.eye(3), (L, skeleton.num_joints, 3, 3)).copy()
    for j, R in _upper_body(spec, times, beat0, rng).items():
        local[:, j] = R
    l1 = float(np.linalg.norm(skeleton.offsets[L_KNEE]))
    l2 = float(np.linalg.norm(skeleton.offsets[L_ANKLE]))
    for f, (hip_j, knee_j, ankle_j) in enumerate(((L_HIP, L_KNEE, L_ANKLE), (R_HIP, R_KNEE, R_ANKLE))):
        hip = root + skeleton.offsets[hip_j]
        g_thigh, g_shin = _leg_ik(hip, feet[f], l1, l2)
        local[:, hip_j] = g_thigh
        local[:, knee_j] = np.swapaxes(g_thigh, -1, -2) @ g_shin
        local[:, ankle_j] = np.swapaxes(g_shin, -1, -2)
    pose = mc.matrix_to_rot6d(local, tol=1e-8).reshape(L, mc.POSE_DIM)
    positions = mc.forward_kinematics(skeleton, pose, root)
    contact = mc.compute_contact_labels(positions, skeleton, spec.fps)
    frame = np.concatenate([contact, root, pose], axis=1)
    stance4 = np.stack([stance[0], stance[1], stance[0], stance[1]], axis=1).astype(np.float64)
    return frame, stance4, positions


def generate_synthetic(spec: SyntheticSpec, skeleton: mc.Skeleton | None = None) -> SyntheticSample:
    spec.validate()
    skeleton = skeleton or mc.load_skeleton()
    rng = np.random.default_rng(spec.seed)
    C, L, fps = spec.dancers, spec.frames, spec.fps
    period_frames = 60.0 * fps / spec.bpm
    f0 = spec.first_beat_frame
    if f0 is None:
        f0 = int(rng.integers(2, max(3, int(period_frames))))
    beat_times = _beat_times(spec, f0)
    beat0 = f0 / fps

    base = formation_positions(spec.formation, C, spec.spacing)
    times = np.arange(L) / fps
    ground = _ground_path(spec, base, times)
    roots = np.concatenate([ground[..., :1], np.full((C, L, 1), ROOT_HEIGHT), ground[..., 1:]], axis=-1)

    if np.linalg.norm(ground, axis=-1).max() > spec.stage_radius:
        raise InfeasibleSpecError(f"{C} dancers at spacing {spec.spacing} m do not fit the stage")
    crossing = np.zeros(L, dtype=bool)
    if C >= 2:
        dists = pairwise_ground_distances(roots)
        if spec.maneuver == "cross":
            crossing = (pairwise_ground_distances(roots[:2]) < 2 * spec.collision_radius)[0]
            others = dists.copy()
            others[0] = np.inf  # the crossing pair
            if others.size and others.min() < MIN_CLEARANCE:
                raise InfeasibleSpecError("formation violates clearance outside the crossing pair")
        elif dists.min() < MIN_CLEARANCE:
            raise InfeasibleSpecError(f"pairwise clearance {dists.min():.3f} m < {MIN_CLEARANCE} m")

    frames = np.zeros((C, L, mc.FRAME_DIM))
    stance = np.zeros((C, L, 4))
    positions = np.zeros((C, L, skeleton.num_joints, 3))
    for c in range(C):
        fn = lambda t, c=c: _ground_path(spec, base, np.asarray(t, dtype=np.float64))[c : c + 1]
        frames[c], stance[c], positions[c] = _dancer_motion(spec, skeleton, fn, beat_times, beat0, rng, c % 2)
    frames[..., mc.ROOT] = roots  # bitwise-identical to the trajectory

    clip, _ = audio.click_track(spec.bpm, L / fps, spec.sample_rate, first_beat=beat0)
    music = audio.extract_features(clip, fps)

    moving = np.flatnonzero(np.ptp(positions, axis=1).max(axis=(0, 2)) > 1e-9)
    windows = _runs(crossing)
    annotations = {
        "beat_frames": [int(round(t * fps)) for t in beat_times],
        "crossing_frames": np.flatnonzero(crossing).tolist(),
        "crossing_windows": windows,
        "moving_joints": moving.tolist(),
        "stance": stance,
        "first_beat_frame": int(f0),
    }
    return SyntheticSample(
        spec,
        clip,
        music,
        mc.GroupMotionSequence(frames, fps),
        TrajectorySequence(roots, fps),
        annotations,
    )


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of True."""
    runs, start = [], None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    music: np.ndarray  # (N, L, 35)
    motion: np.ndarray  # (N, C, L, 151)
    fps: float
    samples: list[SyntheticSample] = field(default_factory=list, repr=False)

    @property
    def trajectories(self) -> np.ndarray:
        return self.motion[..., mc.ROOT]

    def __len__(self) -> int:
        return self.music.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.music[idx], self.motion[idx], self.fps, [self.samples[i] for i in idx] if self.samples else [])


def randomized_spec(base: SyntheticSpec, rng: np.random.Generator) -> SyntheticSpec:
    """Draw per-sequence variation around ``base`` (tempo, size, speed, heading, limbs)."""
    return replace(
        base,
        bpm=float(rng.uniform(90, 150)),
        spacing=float(rng.uniform(1.2, 2.0)),
        speed=float(rng.uniform(0.1, 0.4)),
        direction=int(rng.choice([-1, 1])),
        start_angle=float(rng.uniform(0, 2 * math.pi)),
        limb_amplitude=float(rng.uniform(0.3, 0.6)),
        seed=int(rng.integers(0, 2**31 - 1)),
        first_beat_frame=None,
    )


def make_dataset(n: int, base: SyntheticSpec = SyntheticSpec(), seed: int = 0, keep_samples: bool = False) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = [generate_synthetic(randomized_spec(base, rng)) for _ in range(n)]
    music = np.stack([s.music.frames for s in samples])
    motion = np.stack([s.motion.data for s in samples])
    return Dataset(music, motion, base.fps, samples if keep_samples else [])
