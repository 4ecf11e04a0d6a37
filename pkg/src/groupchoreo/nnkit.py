"""Neural building blocks shared by the trajectory and motion models.

torch supplies tensors and reverse-mode autodiff; the layers, their
initialisation, Adam and the finite-difference gradient check live here.
Everything defaults to float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; training aborts."""


def _uniform(shape, fan_in: int, dtype, generator=None) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    t = torch.empty(shape, dtype=dtype)
    return t.uniform_(-bound, bound, generator=generator)


# ---------------------------------------------------------------------------
# dense / MLP


def dense(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"dense: input width {x.shape[-1]} != weight columns {W.shape[1]}")
    y = x @ W.transpose(0, 1)
    return y if b is None else y + b


class Dense(nn.Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True, dtype=DTYPE, generator=None):
        super().__init__()
        if n_in <= 0 or n_out <= 0:
            raise ValueError("layer widths must be positive")
        self.weight = nn.Parameter(_uniform((n_out, n_in), n_in, dtype, generator))
        self.bias = nn.Parameter(torch.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return dense(x, self.weight, self.bias)


class MLP(nn.Module):
    """Stack of Dense layers; ``final_act`` also applies the activation after the last layer."""

    def __init__(
        self,
        sizes: Sequence[int],
        act: Callable = F.relu,
        final_act: bool = False,
        dtype=DTYPE,
        generator=None,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            Dense(a, b, dtype=dtype, generator=generator) for a, b in zip(sizes[:-1], sizes[1:])
        )
        self.act = act
        self.final_act = final_act

    def forward(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.final_act:
                x = self.act(x)
        return x


# ---------------------------------------------------------------------------
# LSTM


def lstm_cell(x, h, c, W_ih, W_hh, b):
    """One step of the gated recurrence; gate order (input, forget, cell, output)."""
    gates = dense(x, W_ih) + dense(h, W_hh) + b
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


class LSTMCell(nn.Module):
    def __init__(self, n_in: int, n_hidden: int, dtype=DTYPE, generator=None):
        super().__init__()
        self.hidden = n_hidden
        self.W_ih = nn.Parameter(_uniform((4 * n_hidden, n_in), n_in, dtype, generator))
        self.W_hh = nn.Parameter(_uniform((4 * n_hidden, n_hidden), n_hidden, dtype, generator))
        self.b = nn.Parameter(torch.zeros(4 * n_hidden, dtype=dtype))

    def forward(self, x, state):
        return lstm_cell(x, state[0], state[1], self.W_ih, self.W_hh, self.b)


class LSTM(nn.Module):
    """Stacked LSTM unrolled over axis -2: (N, L, n_in) -> (N, L, hidden)."""

    def __init__(self, n_in: int, n_hidden: int, layers: int, dtype=DTYPE, generator=None):
        super().__init__()
        self.cells = nn.ModuleList(
            LSTMCell(n_in if k == 0 else n_hidden, n_hidden, dtype, generator) for k in range(layers)
        )

    def forward(self, x):
        out = x
        for cell in self.cells:
            h = out.new_zeros(*out.shape[:-2], cell.hidden)
            c = h
            steps = []
            for t in range(out.shape[-2]):
                h, c = cell(out[..., t, :], (h, c))
                steps.append(h)
            out = torch.stack(steps, dim=-2)
        return out


# ---------------------------------------------------------------------------
# attention


def causal_mask(n_q: int, n_k: int, dtype=DTYPE) -> torch.Tensor:
    """Additive mask: -inf where key index > query index."""
    i = torch.arange(n_q)[:, None]
    j = torch.arange(n_k)[None, :]
    return torch.zeros(n_q, n_k, dtype=dtype).masked_fill(j > i, float("-inf"))


def attention_weights(q, k, bias=None, causal: bool = False):
    """softmax(q k^T / sqrt(d) + bias [+ causal mask]) over the last axis."""
    d = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    if bias is not None:
        logits = logits + bias
    if causal:
        logits = logits + causal_mask(q.shape[-2], k.shape[-2], logits.dtype)
    return torch.softmax(logits, dim=-1)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with queries from one stream and keys/values from another.

    With ``causal=True`` and ``max_len`` set, a learned per-head additive bias
    (zero-initialised, only its lower triangle ever reaches the softmax) is
    added to the logits.
    """

    def __init__(
        self,
        width: int,
        heads: int,
        causal: bool = False,
        max_len: int | None = None,
        dtype=DTYPE,
        generator=None,
    ):
        super().__init__()
        if width <= 0 or heads <= 0 or width % heads:
            raise ValueError(f"heads ({heads}) must divide width ({width})")
        self.width, self.heads, self.causal = width, heads, causal
        self.q = Dense(width, width, dtype=dtype, generator=generator)
        self.k = Dense(width, width, dtype=dtype, generator=generator)
        self.v = Dense(width, width, dtype=dtype, generator=generator)
        self.out = Dense(width, width, dtype=dtype, generator=generator)
        self.bias = (
            nn.Parameter(torch.zeros(heads, max_len, max_len, dtype=dtype))
            if max_len is not None
            else None
        )

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.heads, -1).transpose(-2, -3)

    def forward(self, query_src, kv_src, return_weights: bool = False):
        Lq, Lk = query_src.shape[-2], kv_src.shape[-2]
        if self.causal and Lq != Lk:
            raise ValueError(f"causal attention needs equal lengths, got {Lq} and {Lk}")
        q, k, v = self._split(self.q(query_src)), self._split(self.k(kv_src)), self._split(self.v(kv_src))
        bias = None
        if self.bias is not None:
            if Lq > self.bias.shape[-1]:
                raise ValueError(f"sequence length {Lq} exceeds attention bias size {self.bias.shape[-1]}")
            bias = self.bias[:, :Lq, :Lk]
        w = attention_weights(q, k, bias, self.causal)
        ctx = (w @ v).transpose(-2, -3)
        y = self.out(ctx.reshape(*ctx.shape[:-2], self.width))
        return (y, w) if return_weights else y


def causal_attention(M_feat, P_feat, params: MultiHeadAttention, return_weights: bool = False):
    """Queries from processed music, keys/values from processed positions."""
    if not params.causal:
        raise ValueError("attention module was not built as causal")
    return params(M_feat, P_feat, return_weights=return_weights)


# ---------------------------------------------------------------------------
# concat-squash


def concat_squash_linear(x, ctx, W_x, W_g, b_g, W_b):
    """y = (W_x x) * sigmoid(W_g ctx + b_g) + W_b ctx."""
    return dense(x, W_x) * torch.sigmoid(dense(ctx, W_g, b_g)) + dense(ctx, W_b)


class ConcatSquashLinear(nn.Module):
    def __init__(self, n_in: int, n_out: int, n_ctx: int, dtype=DTYPE, generator=None):
        super().__init__()
        self.W_x = nn.Parameter(_uniform((n_out, n_in), n_in, dtype, generator))
        self.W_g = nn.Parameter(_uniform((n_out, n_ctx), n_ctx, dtype, generator))
        self.b_g = nn.Parameter(torch.zeros(n_out, dtype=dtype))
        self.W_b = nn.Parameter(_uniform((n_out, n_ctx), n_ctx, dtype, generator))

    def forward(self, x, ctx):
        return concat_squash_linear(x, ctx, self.W_x, self.W_g, self.b_g, self.W_b)


# ---------------------------------------------------------------------------
# misc encodings


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos table: (...,) positions -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    ang = positions.to(DTYPE)[..., None] * freqs
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        enc = torch.cat([enc, torch.zeros_like(enc[..., :1])], dim=-1)
    return enc


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


class Adam:
    def __init__(self, params: Iterable[torch.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(
            self.params, [p.grad for p in self.params], self.state, self.lr, *self.betas, self.eps
        )


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    ``f`` closes over ``params`` (which must require grad). Relative error per
    component is |a - n| / max(|a|, |n|, atol).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    errors = []
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(f())
                flat[i] = orig - h
                fm = float(f())
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(g.reshape(-1)[i])
                denom = max(abs(ana), abs(num), atol)
                worst = max(worst, abs(ana - num) / denom)
            errors.append(worst)
    return GradCheckReport(max(errors, default=0.0), errors, tol)
