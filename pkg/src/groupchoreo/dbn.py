"""Dance-Beat Navigator: music-driven autoregressive trajectory generation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import savgol_filter
import torch
from torch import nn
from torch.nn import functional as F

from .nnkit import DTYPE, LSTM, MLP, Adam, MultiHeadAttention, NonFiniteError, sinusoidal_encoding

log = logging.getLogger(__name__)


@dataclass
class TrajectorySequence:
    positions: np.ndarray  # (C, L, 3)
    fps: float

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3 or self.positions.shape[0] < 1:
            raise ValueError(f"trajectory must be (C>=1, L, 3), got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValueError("trajectory contains non-finite values")

    @property
    def dancers(self) -> int:
        return self.positions.shape[0]

    @property
    def frames(self) -> int:
        return self.positions.shape[1]


@dataclass
class DbnConfig:
    hidden: int = 64
    layers: int = 6  # stacked trajectory-attention blocks
    heads: int = 8
    lstm_layers: int = 3
    music_layers: int = 3
    decoder_layers: int = 4
    max_dancers: int = 5
    max_len: int = 120
    music_dim: int = 35


@dataclass
class DbnLossWeights:
    velocity: float = 2.0
    distcon: float = 2.0


class DbnModel(nn.Module):
    def __init__(self, config: DbnConfig = DbnConfig(), seed: int = 0, dtype=DTYPE):
        super().__init__()
        c = config
        if min(c.hidden, c.layers, c.heads, c.lstm_layers, c.music_layers, c.decoder_layers) <= 0:
            raise ValueError("all DBN widths and layer counts must be positive")
        self.config = c
        g = torch.Generator().manual_seed(seed)
        H = c.hidden
        self.music_mlp = MLP([c.music_dim] + [H] * c.music_layers, act=F.leaky_relu, final_act=True, dtype=dtype, generator=g)
        self.lstm = LSTM(3, H, c.lstm_layers, dtype=dtype, generator=g)
        self.identity = nn.Parameter(torch.empty(c.max_dancers, H, dtype=dtype).uniform_(-1, 1, generator=g))
        self.attn = nn.ModuleList(
            MultiHeadAttention(H, c.heads, causal=True, max_len=c.max_len, dtype=dtype, generator=g)
            for _ in range(c.layers)
        )
        self.mlps = nn.ModuleList(MLP([H, H, H], act=F.leaky_relu, dtype=dtype, generator=g) for _ in range(c.layers))
        self.decoder = MLP([H] * c.decoder_layers + [3], act=F.leaky_relu, dtype=dtype, generator=g)
        # linear skip from the current coordinates; starts as the identity so an
        # untrained navigator holds position instead of jumping to the origin
        self.skip = nn.Parameter(torch.eye(3, dtype=dtype))
        self.register_buffer("music_mean", torch.zeros(c.music_dim, dtype=dtype))
        self.register_buffer("music_std", torch.ones(c.music_dim, dtype=dtype))
        self.register_buffer("tpe", sinusoidal_encoding(torch.arange(c.max_len), H).to(dtype))

    def set_music_stats(self, music: np.ndarray) -> None:
        flat = np.asarray(music).reshape(-1, self.config.music_dim)
        self.music_mean.copy_(torch.as_tensor(flat.mean(0)))
        self.music_std.copy_(torch.as_tensor(np.maximum(flat.std(0), 1e-6)))

    def encode(self, music: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """(B, L, 35) music and (B, C, L, 3) positions -> (B, C, L, H); frame i sees frames <= i."""
        B, C, L, _ = positions.shape
        if C > self.config.max_dancers:
            raise ValueError(f"{C} dancers exceeds the model's {self.config.max_dancers} identity slots")
        if music.shape[-2] != L:
            raise ValueError(f"music has {music.shape[-2]} frames, positions {L}")
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        H = self.config.hidden
        tpe = self.tpe[:L]
        m = self.music_mlp((music - self.music_mean) / self.music_std) + tpe
        q = m[:, None].expand(B, C, L, H)
        p = self.lstm(positions.reshape(B * C, L, 3)).reshape(B, C, L, H)
        p = p + self.identity[:C, None, :] + tpe
        for attn, mlp in zip(self.attn, self.mlps):
            p = p + attn(q, p)
            p = p + mlp(p)
        return p

    def decode(self, hidden: torch.Tensor, current: torch.Tensor) -> torch.Tensor:
        """Next coordinates from per-dancer hidden states and current coordinates (..., 3)."""
        return self.decoder(hidden) + current @ self.skip.T


def encode_step(model: DbnModel, music, positions) -> torch.Tensor:
    """Hidden state per dancer at the last given frame: music (i, 35), positions (C, i, 3) -> (C, H)."""
    music = torch.as_tensor(music, dtype=DTYPE)
    positions = torch.as_tensor(positions, dtype=DTYPE)
    if positions.shape[1] < 1:
        raise ValueError("history must contain at least one frame")
    return model.encode(music[None], positions[None])[0, :, -1]


def decode_next(model: DbnModel, hidden, current) -> torch.Tensor:
    """(C, H) hidden states and (C, 3) frame-i coordinates -> (C, 3) frame i+1."""
    return model.decode(torch.as_tensor(hidden, dtype=DTYPE), torch.as_tensor(current, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Savitzky-Golay


def _check_savgol(n: int, window: int, order: int):
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be a positive odd integer")
    if not 0 <= order < window:
        raise ValueError("order must be in [0, window)")
    if n < window:
        raise ValueError(f"series must have at least {window} samples")


def savgol_smooth(series, window: int = 5, order: int = 3) -> np.ndarray:
    """Least-squares polynomial smoothing; edges evaluate the terminal window fits."""
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("series must be 1-D")
    _check_savgol(y.size, window, order)
    return savgol_filter(y, window, order, mode="interp")


def smooth_trajectory(positions: np.ndarray, window: int = 5, order: int = 3) -> np.ndarray:
    """Per-axis smoothing of (C, L, 3) positions along frames."""
    pos = np.asarray(positions, dtype=np.float64)
    _check_savgol(pos.shape[-2], window, order)
    return savgol_filter(pos, window, order, axis=-2, mode="interp")


# ---------------------------------------------------------------------------
# rollout


@torch.no_grad()
def rollout_batch(model: DbnModel, music, seed, smooth: bool = True) -> np.ndarray:
    """music (B, L, 35), seed (B, C, 3) -> (B, C, L, 3) free-running positions."""
    music = torch.as_tensor(np.asarray(music), dtype=DTYPE)
    seed = torch.as_tensor(np.asarray(seed), dtype=DTYPE)
    L = music.shape[1]
    if L < 2:
        raise ValueError("rollout needs at least 2 frames")
    traj = [seed]
    for i in range(1, L):
        hist = torch.stack(traj, dim=2)
        hidden = model.encode(music[:, :i], hist)[:, :, -1]
        traj.append(model.decode(hidden, traj[-1]))
    out = torch.stack(traj, dim=2).numpy()
    if smooth:
        out = np.stack([smooth_trajectory(o) for o in out])
    return out


def rollout(model: DbnModel, music, seed, smooth: bool = True, fps: float = 30.0) -> TrajectorySequence:
    pos = rollout_batch(model, np.asarray(music)[None], np.asarray(seed)[None], smooth)[0]
    return TrajectorySequence(pos, fps)


# ---------------------------------------------------------------------------
# losses; tensors are (..., C, L, 3)


def loss_recon(gt, pred):
    return ((gt - pred) ** 2).mean()


def loss_velocity(gt, pred):
    dg = gt[..., 1:, :] - gt[..., :-1, :]
    dp = pred[..., 1:, :] - pred[..., :-1, :]
    return ((dg - dp) ** 2).mean()


def loss_distcon(gt, pred):
    """Pairwise-offset mismatch, summed over frames and unordered pairs, / (C-1).

    Leading batch axes are averaged.
    """
    gt = torch.as_tensor(gt)
    pred = torch.as_tensor(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    C = gt.shape[-3]
    if C < 2:
        raise ValueError("distance consistency needs at least two dancers")
    i, j = torch.triu_indices(C, C, offset=1)
    dg = gt[..., i, :, :] - gt[..., j, :, :]
    dp = pred[..., i, :, :] - pred[..., j, :, :]
    per_seq = ((dg - dp) ** 2).sum(dim=(-1, -2, -3)) / (C - 1)
    return per_seq.mean()


def loss_dbn(gt, pred, weights: DbnLossWeights = DbnLossWeights()):
    gt = torch.as_tensor(gt)
    pred = torch.as_tensor(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    recon = loss_recon(gt, pred)
    vel = loss_velocity(gt, pred)
    if gt.shape[-3] >= 2:
        dc = loss_distcon(gt, pred)
    else:
        warnings.warn("single dancer: distance-consistency term set to 0")
        dc = recon.new_zeros(())
    total = recon + weights.velocity * vel + weights.distcon * dc
    return total, {"recon": recon, "velocity": vel, "distcon": dc, "total": total}


# ---------------------------------------------------------------------------
# training


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 50
    epochs: int = 200
    clip_norm: float | None = 1.0  # global gradient-norm clip; None disables


@dataclass
class TrainResult:
    model: nn.Module
    curve: list[dict[str, float]] = field(default_factory=list)


def clip_gradients(model: nn.Module, max_norm: float | None) -> None:
    """Rescale all gradients jointly so their global norm is at most ``max_norm``."""
    if max_norm is None:
        return
    try:
        nn.utils.clip_grad_norm_(model.parameters(), max_norm, error_if_nonfinite=True)
    except RuntimeError as e:
        raise NonFiniteError("non-finite gradient norm") from e


def teacher_forced(model: DbnModel, music: torch.Tensor, traj: torch.Tensor) -> torch.Tensor:
    """Predict frames 2..L from ground-truth history; frame 1 is copied."""
    hidden = model.encode(music[:, :-1], traj[:, :, :-1])
    return torch.cat([traj[:, :, :1], model.decode(hidden, traj[:, :, :-1])], dim=2)


def train_dbn(
    model: DbnModel,
    music: np.ndarray,
    traj: np.ndarray,
    weights: DbnLossWeights = DbnLossWeights(),
    optim: OptimConfig = OptimConfig(),
    seed: int = 0,
) -> TrainResult:
    """music (N, L, 35), traj (N, C, L, 3). Deterministic given ``seed``."""
    music_t = torch.as_tensor(np.asarray(music), dtype=DTYPE)
    traj_t = torch.as_tensor(np.asarray(traj), dtype=DTYPE)
    model.set_music_stats(np.asarray(music))
    opt = Adam(model.parameters(), lr=optim.lr)
    rng = np.random.default_rng(seed)
    n = music_t.shape[0]
    result = TrainResult(model)
    for epoch in range(optim.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, optim.batch_size):
            idx = torch.as_tensor(order[start : start + optim.batch_size])
            gt = traj_t[idx]
            pred = teacher_forced(model, music_t[idx], gt)
            total, parts = loss_dbn(gt, pred, weights)
            if not torch.isfinite(total):
                raise NonFiniteError(f"non-finite DBN loss at epoch {epoch + 1}")
            opt.zero_grad()
            total.backward()
            clip_gradients(model, optim.clip_norm)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(idx)
        row = {k: v / n for k, v in sums.items()}
        row["epoch"] = epoch + 1
        result.curve.append(row)
        log.debug("dbn epoch %d total %.6f", epoch + 1, row["total"])
    return result


def config_dict(config: DbnConfig) -> dict:
    return asdict(config)
