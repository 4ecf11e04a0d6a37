"""Group and single-dancer evaluation metrics.

Group motions are (C, L, 151) arrays or GroupMotionSequence objects; sets are
sequences of those. FID and GMR use handcrafted kinetic features, so their
values are only comparable between runs of this package.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import motion as mc
from .audio import BEAT_COL

DEFAULT_TIF_RADIUS = 0.2
ANKLES = (7, 8)
# COM accelerations below this (m/s^2) are rounding residue of constant-velocity paths
ACCEL_FLOOR = 1e-8


def _data(motion) -> np.ndarray:
    if isinstance(motion, mc.GroupMotionSequence):
        return motion.data
    return np.asarray(motion, dtype=np.float64)


def _group(motion) -> np.ndarray:
    m = _data(motion)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3 or m.shape[-1] != mc.FRAME_DIM:
        raise mc.DimensionError(f"expected (C, L, {mc.FRAME_DIM}) motion, got {m.shape}")
    return m


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class FeatureDistribution:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match width {d}")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-10):
            raise ValueError("covariance is not symmetric")

    @property
    def width(self) -> int:
        return self.mean.size

    @classmethod
    def fit(cls, features) -> "FeatureDistribution":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError("need at least two feature vectors to estimate a covariance")
        cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
        return cls(f.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(a: FeatureDistribution, b: FeatureDistribution) -> float:
    """Squared Frechet distance between two Gaussians.

    Tr((S1 S2)^1/2) is evaluated as Tr((R S2 R)^1/2) with R = S1^1/2, which keeps
    every square root symmetric; tiny negative eigenvalues are clamped to 0.
    """
    if a.width != b.width:
        raise ValueError(f"feature widths differ: {a.width} vs {b.width}")
    r = _psd_sqrt(a.cov)
    w = np.linalg.eigvalsh(0.5 * (r @ b.cov @ r + (r @ b.cov @ r).T))
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mean - b.mean
    d2 = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross
    return float(max(d2, 0.0))


# ---------------------------------------------------------------------------
# kinetic features


def kinetic_features(motion, skeleton: mc.Skeleton, fps: float) -> np.ndarray:
    """Per-joint mean squared speed of one dancer's (L, 151) motion; leading axes allowed."""
    m = _data(motion)
    if m.shape[-2] < 2:
        raise mc.DimensionError("kinetic features need at least two frames")
    vel = mc.joint_velocities(mc.motion_joint_positions(skeleton, m), fps)
    return (vel**2).sum(-1).mean(-2)


def _dancer_features(motion_set, skeleton, fps) -> np.ndarray:
    return np.concatenate([kinetic_features(_group(m), skeleton, fps) for m in motion_set])


def group_features(motion, skeleton: mc.Skeleton, fps: float) -> np.ndarray:
    """Mean dancer kinetic feature (24) + mean/std of pairwise ground distances (2)."""
    m = _group(motion)
    kin = kinetic_features(m, skeleton, fps).mean(axis=0)
    C = m.shape[0]
    if C < 2:
        return np.concatenate([kin, [0.0, 0.0]])
    ground = m[..., [4, 6]]
    dists = np.stack([np.linalg.norm(ground[i] - ground[j], axis=-1) for i, j in combinations(range(C), 2)])
    return np.concatenate([kin, [dists.mean(), dists.std()]])


def metric_fid(generated, reference, skeleton: mc.Skeleton, fps: float) -> float:
    gen = FeatureDistribution.fit(_dancer_features(generated, skeleton, fps))
    ref = FeatureDistribution.fit(_dancer_features(reference, skeleton, fps))
    return frechet_distance(gen, ref)


def metric_gmr(generated, reference, skeleton: mc.Skeleton, fps: float) -> float:
    gen = FeatureDistribution.fit([group_features(m, skeleton, fps) for m in generated])
    ref = FeatureDistribution.fit([group_features(m, skeleton, fps) for m in reference])
    return frechet_distance(gen, ref)


def metric_div(motion_set, skeleton: mc.Skeleton | None = None, fps: float = 30.0, features=None) -> float:
    """Mean pairwise Euclidean distance between kinetic-feature vectors.

    ``motion_set`` holds single-dancer (L, 151) motions; pass ``features``
    directly to skip extraction.
    """
    if features is None:
        features = np.stack([kinetic_features(m, skeleton, fps) for m in motion_set])
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two motions")
    total = sum(np.linalg.norm(f[i] - f[j]) for i, j in combinations(range(n), 2))
    return float(2.0 * total / (n * (n - 1)))


# ---------------------------------------------------------------------------
# group metrics


def metric_gmc(motion, skeleton: mc.Skeleton, fps: float) -> float:
    """100 x mean clamped zero-lag correlation between dancers' joint-velocity streams."""
    m = _group(motion)
    C, L = m.shape[:2]
    if C < 2 or L < 2:
        raise ValueError("group coherence needs at least two dancers and two frames")
    vel = mc.joint_velocities(mc.motion_joint_positions(skeleton, m), fps).reshape(C, -1)
    vel = vel - vel.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(vel, axis=1)
    scores = []
    for i, j in combinations(range(C), 2):
        if norms[i] == 0.0 or norms[j] == 0.0:
            continue
        rho = float(vel[i] @ vel[j] / (norms[i] * norms[j]))
        scores.append(100.0 * max(rho, 0.0))
    if not scores:
        return 100.0
    return float(min(np.mean(scores), 100.0))


def collision_frames(roots, radius: float = DEFAULT_TIF_RADIUS) -> np.ndarray:
    """Boolean (L,) mask of frames where some pair is closer than 2 * radius on the ground."""
    r = np.asarray(roots, dtype=np.float64)
    C = r.shape[0]
    if C < 2:
        raise ValueError("collision test needs at least two dancers")
    ground = r[..., [0, 2]]
    hit = np.zeros(r.shape[1], dtype=bool)
    for i, j in combinations(range(C), 2):
        hit |= np.linalg.norm(ground[i] - ground[j], axis=-1) < 2.0 * radius
    return hit


def metric_tif(motion, radius: float = DEFAULT_TIF_RADIUS) -> float:
    """Fraction of frames with at least one dancer pair in collision.

    Accepts packed (C, L, 151) motion or bare (C, L, 3) root trajectories.
    """
    m = np.asarray(motion.data if isinstance(motion, mc.GroupMotionSequence) else motion, dtype=np.float64)
    roots = m[..., mc.ROOT] if m.shape[-1] == mc.FRAME_DIM else m
    return float(collision_frames(roots, radius).mean())


# ---------------------------------------------------------------------------
# single-dancer metrics


def kinematic_beats(motion, skeleton: mc.Skeleton, fps: float) -> np.ndarray:
    """Frames that are strict local minima of mean joint speed."""
    vel = mc.joint_velocities(mc.motion_joint_positions(skeleton, _data(motion)), fps)
    speed = np.linalg.norm(vel, axis=-1).mean(axis=-1)
    inner = (speed[1:-1] < speed[:-2]) & (speed[1:-1] < speed[2:])
    return np.flatnonzero(inner) + 1


def beat_alignment(music_beats, kin_beats, sigma: float = 3.0) -> float:
    music_beats = np.asarray(music_beats, dtype=np.float64)
    kin_beats = np.asarray(kin_beats, dtype=np.float64)
    if music_beats.size == 0:
        raise ValueError("no music beats to align against")
    if kin_beats.size == 0:
        return 0.0
    gap = np.min(np.abs(music_beats[:, None] - kin_beats[None, :]), axis=1)
    return float(np.mean(np.exp(-(gap**2) / (2.0 * sigma**2))))


def metric_mmc(motion, music, skeleton: mc.Skeleton, fps: float, sigma: float = 3.0) -> float:
    """Beat alignment of one dancer (L, 151), or the dancer mean for (C, L, 151)."""
    feats = music.frames if hasattr(music, "frames") else np.asarray(music)
    music_beats = np.flatnonzero(feats[:, BEAT_COL] > 0.5)
    m = _group(motion)
    return float(np.mean([beat_alignment(music_beats, kinematic_beats(d, skeleton, fps), sigma) for d in m]))


def _pfc_single(m: np.ndarray, skeleton: mc.Skeleton, fps: float) -> float:
    pos = mc.motion_joint_positions(skeleton, m)
    com = pos.mean(axis=1)
    acc = (com[2:] - 2.0 * com[1:-1] + com[:-2]) * fps**2
    acc_ground = np.linalg.norm(acc[:, [0, 2]], axis=-1)
    peak = acc_ground.max()
    if peak <= ACCEL_FLOOR:
        return 0.0
    feet = np.linalg.norm(mc.joint_velocities(pos, fps)[1:-1][:, list(ANKLES)], axis=-1)
    s = acc_ground * feet[:, 0] * feet[:, 1]
    return float(100.0 * s.mean() / peak)


def metric_pfc(motion, skeleton: mc.Skeleton, fps: float) -> float:
    """Foot-speed product weighted by ground-plane COM acceleration, x100.

    Frames i = 1..L-2 use the central second difference of the COM and the
    backward-difference ankle speeds. Groups average over dancers. A clip
    whose peak acceleration is within ``ACCEL_FLOOR`` of zero scores 0.
    """
    m = _group(motion)
    if m.shape[1] < 3:
        raise mc.DimensionError("PFC needs at least three frames")
    return float(np.mean([_pfc_single(d, skeleton, fps) for d in m]))


# ---------------------------------------------------------------------------
# report


REPORT_KEYS = ("GMR", "GMC", "TIF", "FID", "Div", "MMC", "PFC")


@dataclass
class MetricsReport:
    gmr: float
    gmc: float
    tif: float
    fid: float
    div: float
    mmc: float
    pfc: float

    def __post_init__(self):
        vals = asdict(self)
        if not all(np.isfinite(v) for v in vals.values()):
            raise ValueError(f"non-finite metric in {vals}")
        if not 0.0 <= self.tif <= 1.0 or not 0.0 <= self.gmc <= 100.0:
            raise ValueError("TIF must lie in [0, 1] and GMC in [0, 100]")

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k.lower())) for k in REPORT_KEYS}

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=False) + "\n"


def evaluate(
    generated: Sequence,
    reference: Sequence,
    music: Sequence,
    skeleton: mc.Skeleton,
    fps: float,
    tif_radius: float = DEFAULT_TIF_RADIUS,
    sigma: float = 3.0,
) -> MetricsReport:
    """Full report for generated group motions against a reference set.

    ``music[i]`` holds the (L, 35) features that conditioned ``generated[i]``.
    """
    gen = [_group(m) for m in generated]
    ref = [_group(m) for m in reference]
    if len(music) != len(gen):
        raise ValueError("need one music feature array per generated sequence")
    dancers = [d for g in gen for d in g]
    return MetricsReport(
        gmr=metric_gmr(gen, ref, skeleton, fps),
        gmc=float(np.mean([metric_gmc(g, skeleton, fps) for g in gen])),
        tif=float(np.mean([metric_tif(g, tif_radius) for g in gen])),
        fid=metric_fid(gen, ref, skeleton, fps),
        div=metric_div(dancers, skeleton, fps),
        mmc=float(np.mean([metric_mmc(g, mu, skeleton, fps, sigma) for g, mu in zip(gen, music)])),
        pfc=float(np.mean([metric_pfc(g, skeleton, fps) for g in gen])),
    )
