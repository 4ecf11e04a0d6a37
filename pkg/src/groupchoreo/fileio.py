"""Binary containers for motion (GMOT), trajectories (TRAJ), music features (MFEA) and checkpoints (CKPT).

All integers are u32 little-endian. Array payloads are f32 LE except
checkpoint tensors, which are stored as f64 so parameters survive exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from . import motion as mc
from .audio import FEATURE_DIM, MusicFeatureSequence
from .dbn import DbnConfig, DbnModel, TrajectorySequence
from .diffusion import TcdiffConfig, TcdiffModel
from .errors import FormatError, MagicError, TruncatedError, VersionError

CKPT_VERSION = 1


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        if len(data) < 4:
            raise TruncatedError(f"file shorter than its {magic!r} magic")
        if data[:4] != magic:
            raise MagicError(magic, data[:4])
        self.data = data
        self.pos = 4

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{what}: need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def array(self, shape, dtype: str, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after payload")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# GMOT / TRAJ / MFEA


def encode_motion(seq: mc.GroupMotionSequence) -> bytes:
    C, L, _ = seq.data.shape
    return b"GMOT" + struct.pack("<IIf", C, L, seq.fps) + _f32(seq.data)


def decode_motion(data: bytes) -> mc.GroupMotionSequence:
    r = _Reader(data, b"GMOT")
    C, L, fps = r.u32("dancer count"), r.u32("frame count"), r.f32("fps")
    arr = r.array((C, L, mc.FRAME_DIM), "<f4", "motion payload")
    r.finish()
    return mc.GroupMotionSequence(arr, fps)


def encode_trajectory(traj: TrajectorySequence) -> bytes:
    C, L, _ = traj.positions.shape
    return b"TRAJ" + struct.pack("<IIf", C, L, traj.fps) + _f32(traj.positions)


def decode_trajectory(data: bytes) -> TrajectorySequence:
    r = _Reader(data, b"TRAJ")
    C, L, fps = r.u32("dancer count"), r.u32("frame count"), r.f32("fps")
    arr = r.array((C, L, 3), "<f4", "trajectory payload")
    r.finish()
    return TrajectorySequence(arr, fps)


def encode_features(music: MusicFeatureSequence) -> bytes:
    L = music.frames.shape[0]
    return b"MFEA" + struct.pack("<II", L, FEATURE_DIM) + _f32(music.frames) + struct.pack("<f", music.fps)


def decode_features(data: bytes) -> MusicFeatureSequence:
    r = _Reader(data, b"MFEA")
    L, width = r.u32("frame count"), r.u32("feature width")
    if width != FEATURE_DIM:
        raise FormatError(f"feature width {width}, expected {FEATURE_DIM}")
    arr = r.array((L, width), "<f4", "feature payload")
    fps = r.f32("fps")
    r.finish()
    return MusicFeatureSequence(arr, fps)


# ---------------------------------------------------------------------------
# CKPT: version, tensor count, tensors (name, shape, f64 values), JSON metadata


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    out = [b"CKPT", struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")  # keeps 0-d tensors 0-d
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data, b"CKPT")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        ndim = r.u32("rank")
        shape = tuple(r.u32("extent") for _ in range(ndim))
        tensors[name] = r.array(shape, "<f8", f"tensor {name}")
    meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    r.finish()
    return tensors, meta


def model_checkpoint(model: DbnModel | TcdiffModel) -> bytes:
    kind = "dbn" if isinstance(model, DbnModel) else "tcdiff"
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items() if v.is_floating_point()}
    return encode_checkpoint(state, {"kind": kind, "config": vars(model.config)})


def model_from_checkpoint(data: bytes, skeleton: mc.Skeleton | None = None) -> DbnModel | TcdiffModel:
    tensors, meta = decode_checkpoint(data)
    kind = meta.get("kind")
    if kind == "dbn":
        model = DbnModel(DbnConfig(**meta["config"]))
    elif kind == "tcdiff":
        model = TcdiffModel(TcdiffConfig(**meta["config"]), skeleton)
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    state = model.state_dict()
    missing = [k for k, v in state.items() if v.is_floating_point() and k not in tensors]
    if missing:
        raise FormatError(f"checkpoint lacks tensors {missing[:3]}")
    for k, v in tensors.items():
        if k not in state:
            raise FormatError(f"unexpected tensor {k!r}")
        if tuple(state[k].shape) != v.shape:
            raise FormatError(f"tensor {k!r} has shape {v.shape}, model expects {tuple(state[k].shape)}")
        state[k] = torch.as_tensor(v, dtype=state[k].dtype)
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# path helpers


def write_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def save_motion(path, seq: mc.GroupMotionSequence) -> None:
    write_bytes(path, encode_motion(seq))


def load_motion(path) -> mc.GroupMotionSequence:
    return decode_motion(Path(path).read_bytes())


def save_trajectory(path, traj: TrajectorySequence) -> None:
    write_bytes(path, encode_trajectory(traj))


def load_trajectory(path) -> TrajectorySequence:
    return decode_trajectory(Path(path).read_bytes())


def save_features(path, music: MusicFeatureSequence) -> None:
    write_bytes(path, encode_features(music))


def load_features(path) -> MusicFeatureSequence:
    return decode_features(Path(path).read_bytes())


def save_model(path, model) -> None:
    write_bytes(path, model_checkpoint(model))


def load_model(path, skeleton: mc.Skeleton | None = None):
    return model_from_checkpoint(Path(path).read_bytes(), skeleton)
