"""Finite-difference gradient checks for every layer and loss, on small random cases."""

from __future__ import annotations

import torch

from . import dbn
from . import diffusion as df
from . import motion as mc
from .nnkit import DTYPE, GradCheckReport, MultiHeadAttention, causal_attention, concat_squash_linear, dense, grad_check, lstm_cell


def _leaf(g, *shape, scale=1.0):
    return (scale * torch.randn(*shape, generator=g, dtype=DTYPE)).requires_grad_()


def _motion(g, C=2, L=5, requires_grad=False):
    x = torch.randn(C, L, mc.FRAME_DIM, generator=g, dtype=DTYPE) * 0.1
    x[..., mc.POSE] += torch.as_tensor(mc.identity_pose())
    x[..., mc.CONTACT] = torch.rand(C, L, 4, generator=g, dtype=DTYPE)
    return x.requires_grad_() if requires_grad else x


def layer_cases(seed: int = 0) -> dict:
    g = torch.Generator().manual_seed(seed)
    cases = {}

    x, W, b = _leaf(g, 3, 4), _leaf(g, 5, 4), _leaf(g, 5)
    R = torch.randn(3, 5, generator=g, dtype=DTYPE)
    cases["dense"] = (lambda: (torch.tanh(dense(x, W, b)) * R).sum(), [x, W, b])

    H = 3
    xs, h, c = _leaf(g, 2, 4), _leaf(g, 2, H), _leaf(g, 2, H)
    W_ih, W_hh, bl = _leaf(g, 4 * H, 4), _leaf(g, 4 * H, H), _leaf(g, 4 * H)
    Rh, Rc = torch.randn(2, H, generator=g, dtype=DTYPE), torch.randn(2, H, generator=g, dtype=DTYPE)

    def lstm_f():
        hn, cn = lstm_cell(xs, h, c, W_ih, W_hh, bl)
        return (hn * Rh).sum() + (cn * Rc).sum()

    cases["lstm_cell"] = (lstm_f, [xs, h, c, W_ih, W_hh, bl])

    attn = MultiHeadAttention(4, 2, causal=True, max_len=4, generator=g)
    with torch.no_grad():
        attn.bias.normal_(0.0, 0.3, generator=g)
    M, P = _leaf(g, 4, 4), _leaf(g, 4, 4)
    Ra = torch.randn(4, 4, generator=g, dtype=DTYPE)
    cases["causal_attention"] = (
        lambda: (causal_attention(M, P, attn) * Ra).sum(),
        [M, P, *attn.parameters()],
    )

    xc, ctx = _leaf(g, 3, 4), _leaf(g, 3, 5)
    W_x, W_g, b_g, W_b = _leaf(g, 2, 4), _leaf(g, 2, 5), _leaf(g, 2), _leaf(g, 2, 5)
    Rc2 = torch.randn(3, 2, generator=g, dtype=DTYPE)
    cases["concat_squash"] = (
        lambda: (concat_squash_linear(xc, ctx, W_x, W_g, b_g, W_b) * Rc2).sum(),
        [xc, ctx, W_x, W_g, b_g, W_b],
    )
    return cases


def loss_cases(seed: int = 0) -> dict:
    g = torch.Generator().manual_seed(seed + 1)
    sk = mc.load_skeleton()
    cases = {}
    gt_t = torch.randn(2, 6, 3, generator=g, dtype=DTYPE)
    pred_t = _leaf(g, 2, 6, 3)
    cases["L_recon"] = (lambda: dbn.loss_recon(gt_t, pred_t), [pred_t])
    cases["L_v"] = (lambda: dbn.loss_velocity(gt_t, pred_t), [pred_t])
    cases["L_DistCon"] = (lambda: dbn.loss_distcon(gt_t, pred_t), [pred_t])

    gt = _motion(g)
    pred = _motion(g, requires_grad=True)
    cases["L_simple"] = (lambda: df.loss_simple(gt, pred), [pred])
    cases["L_RFK"] = (lambda: df.loss_rfk(gt, pred, sk), [pred])
    cases["L_vel"] = (lambda: df.loss_vel(gt, pred, sk, 30.0), [pred])
    cases["L_contact"] = (lambda: df.loss_contact(pred, sk, 30.0), [pred])
    return cases


def run_gradchecks(seed: int = 0, h: float = 1e-4, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    reports = {}
    for name, (f, params) in {**layer_cases(seed), **loss_cases(seed)}.items():
        reports[name] = grad_check(f, params, h=h, tol=tol)
    return reports
