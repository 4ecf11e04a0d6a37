"""Trajectory-controllable diffusion over packed group motion.

Motion tensors are (B, C, L, 151) in ``[contact, root, pose]`` order. Root
channels are never noised: they carry the conditioning trajectory at every
step, and the denoiser writes them back verbatim into its x0 estimate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import motion as mc
from .dbn import OptimConfig, TrainResult, clip_gradients
from .nnkit import DTYPE, MLP, Adam, ConcatSquashLinear, Dense, MultiHeadAttention, NonFiniteError, sinusoidal_encoding

log = logging.getLogger(__name__)

NOISED = np.r_[0:4, 7:151]  # contact + pose channels
N_NOISED = NOISED.size  # 148


# ---------------------------------------------------------------------------
# schedule


@dataclass
class DiffusionSchedule:
    """Arrays are indexed by t = 0..T; entry 0 is the clean-data convention (alpha_bar = 1)."""

    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_x0: np.ndarray
    posterior_xt: np.ndarray
    posterior_var: np.ndarray
    kind: str = "custom"

    @property
    def T(self) -> int:
        return self.alphas.size - 1

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    @classmethod
    def from_alphas(cls, alphas, kind: str = "custom") -> "DiffusionSchedule":
        a = np.asarray(alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("need at least one diffusion step")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphas must lie in (0, 1]")
        alphas = np.concatenate([[1.0], a])
        ab = np.cumprod(alphas)
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        beta = 1.0 - alphas
        denom = 1.0 - ab
        safe = denom > 0
        c0 = np.ones_like(ab)
        ct = np.zeros_like(ab)
        var = np.zeros_like(ab)
        c0[safe] = beta[safe] * np.sqrt(ab_prev[safe]) / denom[safe]
        ct[safe] = (1.0 - ab_prev[safe]) * np.sqrt(alphas[safe]) / denom[safe]
        var[safe] = beta[safe] * (1.0 - ab_prev[safe]) / denom[safe]
        return cls(alphas, ab, c0, ct, var, kind)


def make_schedule(kind: str = "cosine", T: int = 50) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, 0.999)
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule.from_alphas(1.0 - betas, kind)


def _per_batch(values: np.ndarray, t, ref: torch.Tensor) -> torch.Tensor:
    tt = torch.as_tensor(t)
    v = torch.as_tensor(values, dtype=ref.dtype)[tt.long()]
    return v.reshape(*v.shape, *([1] * (ref.ndim - v.ndim)))


def q_sample_conditional(x0, traj, t, schedule: DiffusionSchedule, noise):
    """Noise contact+pose channels in closed form; root channels become ``traj`` exactly.

    ``x0`` (B, C, L, 151), ``traj`` (B, C, L, 3), ``noise`` (B, C, L, 148), ``t`` int or (B,).
    """
    x0 = torch.as_tensor(x0)
    traj = torch.as_tensor(traj, dtype=x0.dtype)
    noise = torch.as_tensor(noise, dtype=x0.dtype)
    if noise.shape != (*x0.shape[:-1], N_NOISED):
        raise ValueError(f"noise must be {(*x0.shape[:-1], N_NOISED)}, got {tuple(noise.shape)}")
    if traj.shape != (*x0.shape[:-1], 3):
        raise ValueError(f"trajectory must be {(*x0.shape[:-1], 3)}, got {tuple(traj.shape)}")
    ab = _per_batch(schedule.alpha_bars, t, x0)
    clean = torch.cat([x0[..., mc.CONTACT], x0[..., mc.POSE]], dim=-1)
    noised = ab.sqrt() * clean + (1.0 - ab).sqrt() * noise
    return torch.cat([noised[..., :4], traj, noised[..., 4:]], dim=-1)


def trajectory_offsets(traj):
    """v_1 = 0, v_i = p_i - p_{i-1} along the frame axis (-2)."""
    d = traj[..., 1:, :] - traj[..., :-1, :]
    return torch.cat([torch.zeros_like(traj[..., :1, :]), d], dim=-2)


# ---------------------------------------------------------------------------
# model


@dataclass
class TcdiffConfig:
    dancers: int = 2
    width: int = 512
    layers: int = 8
    heads: int = 8
    ff_mult: int = 2
    seq_len: int = 120
    csl_layers: int = 3
    d_csl: int = 128
    d_ctx: int = 512
    music_dim: int = 35
    use_fa: bool = True
    use_fp: bool = True
    offset_scale: float = 30.0  # trajectory offsets enter the adaptor as m/s at 30 fps
    fa_init_scale: float = 1e-2  # shrinks the last adaptor layer so it starts near the identity


class DecoderBlock(nn.Module):
    """Self-attention over frames, cross-attention to music, feed-forward; each FiLM-modulated by t."""

    def __init__(self, width: int, heads: int, ff_mult: int, dtype=DTYPE, generator=None):
        super().__init__()
        self.norms = nn.ModuleList(nn.LayerNorm(width, dtype=dtype) for _ in range(3))
        self.self_attn = MultiHeadAttention(width, heads, dtype=dtype, generator=generator)
        self.cross_attn = MultiHeadAttention(width, heads, dtype=dtype, generator=generator)
        self.ff = MLP([width, ff_mult * width, width], act=F.gelu, dtype=dtype, generator=generator)
        self.film = Dense(width, 6 * width, dtype=dtype, generator=generator)

    def forward(self, x, memory, temb):
        s1, b1, s2, b2, s3, b3 = self.film(F.silu(temb))[:, None, :].chunk(6, dim=-1)
        h = self.norms[0](x)
        x = x + self.self_attn(h, h) * (1 + s1) + b1
        x = x + self.cross_attn(self.norms[1](x), memory) * (1 + s2) + b2
        x = x + self.ff(self.norms[2](x)) * (1 + s3) + b3
        return x


class TcdiffModel(nn.Module):
    def __init__(self, config: TcdiffConfig = TcdiffConfig(), skeleton: mc.Skeleton | None = None, seed: int = 0, dtype=DTYPE):
        super().__init__()
        c = config
        if min(c.dancers, c.width, c.layers, c.heads, c.csl_layers, c.d_csl) <= 0 or c.d_ctx <= 5:
            raise ValueError("invalid TCDiff dimensions")
        self.config = c
        g = torch.Generator().manual_seed(seed)
        W, C = c.width, c.dancers
        self.input_linear = Dense(mc.FRAME_DIM, W, dtype=dtype, generator=g)
        self.fusion = (
            MLP([C * mc.FRAME_DIM, C * W, C * W, C * W], act=F.relu, final_act=True, dtype=dtype, generator=g)
            if c.use_fp
            else None
        )
        self.time_mlp = MLP([W, W, W], act=F.silu, dtype=dtype, generator=g)
        self.music_proj = Dense(c.music_dim, W, dtype=dtype, generator=g)
        self.blocks = nn.ModuleList(DecoderBlock(W, c.heads, c.ff_mult, dtype, g) for _ in range(c.layers))
        self.output = Dense(W, mc.FRAME_DIM, dtype=dtype, generator=g)
        if c.use_fa:
            d_t = (c.d_ctx - 3) // 2
            self.fa_time = Dense(W, d_t, dtype=dtype, generator=g)
            self.fa_music = Dense(c.music_dim, c.d_ctx - 3 - d_t, dtype=dtype, generator=g)
            self.fa_in = Dense(mc.FRAME_DIM, c.d_csl, dtype=dtype, generator=g)
            outs = [c.d_csl] * (c.csl_layers - 1) + [mc.FRAME_DIM]
            ins = [c.d_csl] * c.csl_layers
            self.fa_csl = nn.ModuleList(
                ConcatSquashLinear(i, o, c.d_ctx, dtype=dtype, generator=g) for i, o in zip(ins, outs)
            )
            with torch.no_grad():
                self.fa_csl[-1].W_x.mul_(c.fa_init_scale)
                self.fa_csl[-1].W_b.mul_(c.fa_init_scale)
        skeleton = skeleton or mc.load_skeleton()
        self.register_buffer("lower_mask", torch.as_tensor(mc.lower_channel_mask(skeleton)))
        self.register_buffer("music_mean", torch.zeros(c.music_dim, dtype=dtype))
        self.register_buffer("music_std", torch.ones(c.music_dim, dtype=dtype))
        self.register_buffer("pos_enc", sinusoidal_encoding(torch.arange(c.seq_len), W).to(dtype))

    def set_music_stats(self, music: np.ndarray) -> None:
        flat = np.asarray(music).reshape(-1, self.config.music_dim)
        self.music_mean.copy_(torch.as_tensor(flat.mean(0)))
        self.music_std.copy_(torch.as_tensor(np.maximum(flat.std(0), 1e-6)))

    def time_embedding(self, t, batch: int) -> torch.Tensor:
        tt = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(batch)
        return self.time_mlp(sinusoidal_encoding(tt, self.config.width))

    def norm_music(self, music):
        return (music - self.music_mean) / self.music_std

    def forward(self, x_t, t, music, traj):
        return denoiser(self, x_t, t, music, traj)


def fusion_projection(model: TcdiffModel, x_t: torch.Tensor) -> torch.Tensor:
    """Group-agent tokens: per frame, all dancers' 151-vectors go through one MLP together."""
    B, C, L, D = x_t.shape
    if C != model.config.dancers:
        raise ValueError(f"model was built for {model.config.dancers} dancers, got {C}")
    if model.fusion is None:
        raise ValueError("model was built without a fusion projection")
    group = x_t.permute(0, 2, 1, 3).reshape(B, L, C * D)
    out = model.fusion(group).reshape(B, L, C, -1)
    return out.permute(0, 2, 1, 3)


def motion_tokens(model: TcdiffModel, x_t: torch.Tensor) -> torch.Tensor:
    tokens = model.input_linear(x_t)
    if model.fusion is not None:
        tokens = tokens + fusion_projection(model, x_t)
    return tokens


def decoder_block_forward(model: TcdiffModel, tokens, music, t) -> torch.Tensor:
    """tokens (B, C, L, W), music (B, L, 35) -> raw motion (B, C, L, 151)."""
    B, C, L, W = tokens.shape
    if music.shape[-2] != L:
        raise ValueError(f"music has {music.shape[-2]} frames, motion {L}")
    if L > model.config.seq_len:
        raise ValueError(f"sequence length {L} exceeds configured {model.config.seq_len}")
    pe = model.pos_enc[:L]
    temb = model.time_embedding(t, B)
    mem = model.music_proj(model.norm_music(music)) + pe
    x = (tokens + pe).reshape(B * C, L, W)
    mem = mem[:, None].expand(B, C, L, W).reshape(B * C, L, W)
    temb_bc = temb[:, None].expand(B, C, W).reshape(B * C, W)
    for block in model.blocks:
        x = block(x, mem, temb_bc)
    return model.output(x).reshape(B, C, L, mc.FRAME_DIM)


def footwork_adaptor(model: TcdiffModel, raw, t, music, offsets) -> torch.Tensor:
    """Correct raw motion with context [time, music, trajectory offsets] through concat-squash layers."""
    if not model.config.use_fa:
        raise ValueError("model was built without a footwork adaptor")
    B, C, L, _ = raw.shape
    if offsets.shape != (B, C, L, 3) or music.shape[-2] != L:
        raise ValueError("offsets must be (B, C, L, 3) and music must match L")
    temb = model.time_embedding(t, B)
    ctx_t = model.fa_time(temb)[:, None, None, :].expand(B, C, L, -1)
    ctx_m = model.fa_music(model.norm_music(music))[:, None].expand(B, C, L, -1)
    ctx = torch.cat([ctx_t, ctx_m, offsets * model.config.offset_scale], dim=-1)
    h = model.fa_in(raw)
    last = len(model.fa_csl) - 1
    for k, layer in enumerate(model.fa_csl):
        h = layer(h, ctx)
        if k < last:
            h = F.leaky_relu(h)
    return raw + h


def denoiser(model: TcdiffModel, x_t, t, music, traj) -> torch.Tensor:
    """x0 estimate: upper body from the decoder, lower body from the adaptor, root = traj."""
    raw = decoder_block_forward(model, motion_tokens(model, x_t), music, t)
    if model.config.use_fa:
        adapted = footwork_adaptor(model, raw, t, music, trajectory_offsets(traj))
        x0 = torch.where(model.lower_mask, adapted, raw)
    else:
        x0 = raw
    return torch.cat([x0[..., mc.CONTACT], traj.to(x0.dtype), x0[..., mc.POSE]], dim=-1)


# ---------------------------------------------------------------------------
# sampling

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


@torch.no_grad()
def sample_batch(
    model: TcdiffModel | None,
    schedule: DiffusionSchedule,
    music,
    traj,
    seed: int = 0,
    stochastic: bool = True,
    denoise_fn: Denoiser | None = None,
) -> np.ndarray:
    """Ancestral sampling. music (B, L, 35), traj (B, C, L, 3) -> (B, C, L, 151).

    Each sequence draws its noise from its own stream keyed by (seed, index).
    """
    music = torch.as_tensor(np.asarray(music), dtype=DTYPE)
    traj = torch.as_tensor(np.asarray(traj), dtype=DTYPE)
    B, C, L, _ = traj.shape
    if music.shape[:2] != (B, L):
        raise ValueError(f"music must be ({B}, {L}, 35), got {tuple(music.shape)}")
    fn = denoise_fn if denoise_fn is not None else (lambda x, t, m, p: denoiser(model, x, t, m, p))
    rngs = [sequence_rng(seed, b) for b in range(B)]

    def draw():
        return torch.as_tensor(np.stack([r.standard_normal((C, L, N_NOISED)) for r in rngs]))

    def assemble(noised):
        return torch.cat([noised[..., :4], traj, noised[..., 4:]], dim=-1)

    def strip(x):
        return torch.cat([x[..., mc.CONTACT], x[..., mc.POSE]], dim=-1)

    x = assemble(draw())
    for t in range(schedule.T, 0, -1):
        tt = torch.full((B,), t, dtype=torch.long)
        x0 = fn(x, tt, music, traj)
        if t == 1:
            x0 = torch.cat([x0[..., mc.CONTACT].clamp(0.0, 1.0), x0[..., 4:]], dim=-1)
        mean = schedule.posterior_x0[t] * strip(x0) + schedule.posterior_xt[t] * strip(x)
        if t > 1 and stochastic:
            mean = mean + math.sqrt(schedule.posterior_var[t]) * draw()
        x = assemble(mean)
    return x.numpy()


def sample(model, schedule, music, traj, seed: int = 0, fps: float = 30.0, **kw) -> mc.GroupMotionSequence:
    out = sample_batch(model, schedule, np.asarray(music)[None], np.asarray(traj)[None], seed, **kw)[0]
    return mc.GroupMotionSequence(out, fps)


# ---------------------------------------------------------------------------
# losses; motion tensors (..., 151)


@dataclass
class TcdiffLossWeights:
    simple: float = 1.0
    rfk: float = 1.0
    vel: float = 1.0
    contact: float = 1.0


def loss_simple(gt, pred):
    return ((gt - pred) ** 2).mean()


def _relative_layout(motion, skeleton: mc.Skeleton):
    # FK with the root at the origin is FK(d) - FK(p): joint layout relative to the root
    return mc.forward_kinematics(skeleton, motion[..., mc.POSE], torch.zeros_like(motion[..., mc.ROOT]))


def loss_rfk(gt, pred, skeleton: mc.Skeleton):
    """Mean over frames of the squared discrepancy of root-relative joint layouts."""
    gt = torch.as_tensor(gt)
    pred = torch.as_tensor(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    return _layout_sq_error(_relative_layout(gt, skeleton), _relative_layout(pred, skeleton))


def _layout_sq_error(a, b):
    return ((a - b) ** 2).sum(dim=(-1, -2)).mean()


def loss_vel(gt, pred, skeleton: mc.Skeleton, fps: float, gt_pos=None, pred_pos=None):
    pg = mc.motion_joint_positions(skeleton, gt) if gt_pos is None else gt_pos
    pp = mc.motion_joint_positions(skeleton, pred) if pred_pos is None else pred_pos
    return ((mc.joint_velocities(pg, fps) - mc.joint_velocities(pp, fps)) ** 2).mean()


def loss_contact(pred, skeleton: mc.Skeleton, fps: float, contacts=None, pred_pos=None):
    pos = mc.motion_joint_positions(skeleton, pred) if pred_pos is None else pred_pos
    feet = mc.joint_velocities(pos, fps)[..., list(skeleton.foot_joints), :]
    c = pred[..., mc.CONTACT] if contacts is None else contacts
    return ((feet * c[..., None]) ** 2).sum(dim=(-1, -2)).mean()


def loss_tcdiff(
    gt,
    pred,
    contacts=None,
    weights: TcdiffLossWeights = TcdiffLossWeights(),
    skeleton: mc.Skeleton | None = None,
    fps: float = 30.0,
):
    """Weighted sum of simple, RFK, joint-velocity and foot-contact terms.

    ``contacts`` defaults to the predicted contact channels.
    """
    skeleton = skeleton or mc.load_skeleton()
    gt = torch.as_tensor(gt)
    pred = torch.as_tensor(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(gt.shape)} vs {tuple(pred.shape)}")
    if gt.shape[-2] < 2:
        raise ValueError("velocity terms need at least two frames")
    # FK is affine in the root, so one root-relative pass per input serves every term
    rel_gt, rel_pred = _relative_layout(gt, skeleton), _relative_layout(pred, skeleton)
    gt_pos = rel_gt + gt[..., None, mc.ROOT]
    pred_pos = rel_pred + pred[..., None, mc.ROOT]
    parts = {
        "simple": loss_simple(gt, pred),
        "rfk": _layout_sq_error(rel_gt, rel_pred),
        "vel": loss_vel(gt, pred, skeleton, fps, gt_pos, pred_pos),
        "contact": loss_contact(pred, skeleton, fps, contacts, pred_pos),
    }
    total = (
        weights.simple * parts["simple"]
        + weights.rfk * parts["rfk"]
        + weights.vel * parts["vel"]
        + weights.contact * parts["contact"]
    )
    parts["total"] = total
    return total, parts


# ---------------------------------------------------------------------------
# training


def _noisy_batch(x0, schedule, rng, t=None):
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    noise = torch.as_tensor(rng.standard_normal((*x0.shape[:-1], N_NOISED)))
    tt = torch.as_tensor(t, dtype=torch.long)
    return q_sample_conditional(x0, x0[..., mc.ROOT], tt, schedule, noise), tt


def train_tcdiff(
    model: TcdiffModel,
    music: np.ndarray,
    motion: np.ndarray,
    schedule: DiffusionSchedule,
    weights: TcdiffLossWeights = TcdiffLossWeights(),
    optim: OptimConfig = OptimConfig(epochs=300),
    seed: int = 0,
    skeleton: mc.Skeleton | None = None,
    fps: float = 30.0,
) -> TrainResult:
    """music (N, L, 35), motion (N, C, L, 151); ground-truth roots condition the denoiser."""
    skeleton = skeleton or mc.load_skeleton()
    music_t = torch.as_tensor(np.asarray(music), dtype=DTYPE)
    motion_t = torch.as_tensor(np.asarray(motion), dtype=DTYPE)
    model.set_music_stats(np.asarray(music))
    opt = Adam(model.parameters(), lr=optim.lr)
    rng = np.random.default_rng(seed)
    n = motion_t.shape[0]
    result = TrainResult(model)
    for epoch in range(optim.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, optim.batch_size):
            idx = torch.as_tensor(order[start : start + optim.batch_size])
            x0 = motion_t[idx]
            x_t, tt = _noisy_batch(x0, schedule, rng)
            pred = denoiser(model, x_t, tt, music_t[idx], x0[..., mc.ROOT])
            total, parts = loss_tcdiff(x0, pred, None, weights, skeleton, fps)
            if not torch.isfinite(total):
                raise NonFiniteError(f"non-finite TCDiff loss at epoch {epoch + 1}")
            opt.zero_grad()
            total.backward()
            clip_gradients(model, optim.clip_norm)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item() * len(idx)
        row = {k: v / n for k, v in sums.items()}
        row["epoch"] = epoch + 1
        result.curve.append(row)
        log.debug("tcdiff epoch %d simple %.6f", epoch + 1, row["simple"])
    return result


@torch.no_grad()
def fixed_eval_loss(model: TcdiffModel, music, motion, schedule: DiffusionSchedule, seed: int = 1234) -> float:
    """L_simple on a frozen draw of timesteps and noise, for before/after comparisons."""
    rng = np.random.default_rng(seed)
    x0 = torch.as_tensor(np.asarray(motion), dtype=DTYPE)
    x_t, tt = _noisy_batch(x0, schedule, rng)
    pred = denoiser(model, x_t, tt, torch.as_tensor(np.asarray(music), dtype=DTYPE), x0[..., mc.ROOT])
    return float(loss_simple(x0, pred))
