import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import savgol_filter

from groupchoreo import dbn
from groupchoreo.nnkit import NonFiniteError, grad_check

D = torch.float64
SMALL = dbn.DbnConfig(hidden=8, layers=1, heads=2, lstm_layers=1, music_layers=1, decoder_layers=2, max_dancers=3, max_len=6)


def small_model(seed=0):
    return dbn.DbnModel(SMALL, seed=seed)


# --- Savitzky-Golay -----------------------------------------------------------------------


def test_savgol_reproduces_cubics():
    x = np.linspace(-2, 3, 17)
    y = 0.5 * x**3 - x**2 + 2 * x - 7
    assert np.abs(dbn.savgol_smooth(y) - y).max() < 1e-9


def test_savgol_constant_unchanged():
    assert np.allclose(dbn.savgol_smooth(np.full(9, 4.2)), 4.2, atol=1e-12)


def test_savgol_center_weight_from_least_squares():
    x = np.arange(-2, 3)
    A = np.vander(x, 4, increasing=True)
    # least-squares fit of the unit impulse, evaluated at offset 0
    coef, *_ = np.linalg.lstsq(A, np.eye(5)[2], rcond=None)
    impulse = np.zeros(11)
    impulse[5] = 1.0
    out = dbn.savgol_smooth(impulse)
    assert out[5] == pytest.approx(coef[0], abs=1e-12)
    assert out[5] == pytest.approx(17 / 35, abs=1e-12)
    assert round(out[5], 3) == 0.486


@settings(max_examples=30)
@given(arrays(np.float64, st.integers(5, 40), elements=st.floats(-100, 100)))
def test_savgol_interior_matches_local_cubic_fit(y):
    # each interior sample is the value at offset 0 of a cubic fitted to its 5-sample window
    A = np.vander(np.arange(-2, 3), 4, increasing=True)
    out = dbn.savgol_smooth(y)
    for i in range(2, y.size - 2):
        coef, *_ = np.linalg.lstsq(A, y[i - 2 : i + 3], rcond=None)
        assert out[i] == pytest.approx(coef[0], abs=1e-8)
    # edges evaluate the terminal window fits
    head, *_ = np.linalg.lstsq(A, y[:5], rcond=None)
    assert np.allclose(out[:2], A[:2] @ head, atol=1e-8)


@pytest.mark.parametrize("window,order", [(4, 2), (5, 5), (0, 0)])
def test_savgol_invalid(window, order):
    with pytest.raises(ValueError):
        dbn.savgol_smooth(np.zeros(10), window, order)


def test_smooth_trajectory_per_axis():
    pos = np.random.default_rng(0).normal(size=(2, 12, 3))
    out = dbn.smooth_trajectory(pos)
    assert np.allclose(out[1, :, 2], savgol_filter(pos[1, :, 2], 5, 3, mode="interp"), atol=1e-12)


# --- losses ------------------------------------------------------------------------------


def test_distcon_hand_case():
    gt = np.array([[[1.0, 0, 0]], [[0.0, 0, 0]]])
    pred = np.array([[[2.0, 0, 0]], [[0.0, 0, 0]]])
    assert float(dbn.loss_distcon(torch.as_tensor(gt), torch.as_tensor(pred))) == 1.0


def test_distcon_three_dancers_direct_sum():
    rng = np.random.default_rng(1)
    gt, pred = rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 4, 3))
    expect = 0.0
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        expect += ((gt[i] - gt[j] - pred[i] + pred[j]) ** 2).sum()
    assert float(dbn.loss_distcon(torch.as_tensor(gt), torch.as_tensor(pred))) == pytest.approx(expect / 2, rel=1e-12)


def test_distcon_zero_cases_and_translation():
    rng = np.random.default_rng(2)
    gt = torch.as_tensor(rng.normal(size=(3, 5, 3)))
    assert float(dbn.loss_distcon(gt, gt)) == 0.0
    shift = torch.tensor([0.25, -1.5, 4.0], dtype=D)
    assert float(dbn.loss_distcon(gt, gt + shift)) == pytest.approx(0.0, abs=1e-24)
    pred = torch.as_tensor(rng.normal(size=(3, 5, 3)))
    base = float(dbn.loss_distcon(gt, pred))
    assert float(dbn.loss_distcon(gt, pred + shift)) == pytest.approx(base, rel=1e-13)
    assert float(dbn.loss_distcon(gt + shift, pred)) == pytest.approx(base, rel=1e-13)


def test_distcon_relabel_symmetry():
    rng = np.random.default_rng(3)
    gt, pred = torch.as_tensor(rng.normal(size=(4, 3, 3))), torch.as_tensor(rng.normal(size=(4, 3, 3)))
    perm = [2, 0, 3, 1]
    assert float(dbn.loss_distcon(gt[perm], pred[perm])) == pytest.approx(float(dbn.loss_distcon(gt, pred)), rel=1e-13)


def test_distcon_needs_two_dancers():
    with pytest.raises(ValueError):
        dbn.loss_distcon(torch.zeros(1, 3, 3), torch.zeros(1, 3, 3))


def test_dbn_loss_hand_case_two_dancers_two_frames():
    gt = np.array([[[0, 0, 0], [1, 0, 0]], [[2, 0, 0], [2, 0, 1]]], dtype=float)
    pred = np.array([[[0, 0, 0], [1, 1, 0]], [[2, 0, 0], [3, 0, 1]]], dtype=float)
    # errors: dancer0 frame1 (0,1,0); dancer1 frame1 (1,0,0); 12 coordinates in total
    recon = 2 / 12
    # deltas differ by the same vectors, 6 delta coordinates
    vel = 2 / 6
    # pair offsets (d0 - d1): frame1 error (0,1,0) - (1,0,0) -> squared norm 2
    distcon = 2 / 1
    total, parts = dbn.loss_dbn(torch.as_tensor(gt), torch.as_tensor(pred))
    assert float(parts["recon"]) == pytest.approx(recon, abs=1e-12)
    assert float(parts["velocity"]) == pytest.approx(vel, abs=1e-12)
    assert float(parts["distcon"]) == pytest.approx(distcon, abs=1e-12)
    assert float(total) == pytest.approx(recon + 2 * vel + 2 * distcon, abs=1e-12)
    total0, _ = dbn.loss_dbn(torch.as_tensor(gt), torch.as_tensor(pred), dbn.DbnLossWeights(0, 0))
    assert float(total0) == pytest.approx(recon, abs=1e-15)


def test_dbn_loss_perfect_prediction_and_single_dancer():
    gt = torch.randn(2, 4, 3, dtype=D)
    _, parts = dbn.loss_dbn(gt, gt.clone())
    assert all(float(v) == 0 for v in parts.values())
    with pytest.warns(UserWarning):
        _, parts = dbn.loss_dbn(gt[:1], gt[:1] + 1)
    assert float(parts["distcon"]) == 0.0


@pytest.mark.parametrize("name", ["recon", "velocity", "distcon"])
def test_dbn_losses_gradcheck(name):
    g = torch.Generator().manual_seed(4)
    gt = torch.randn(2, 3, 5, 3, generator=g, dtype=D)
    pred = torch.randn(2, 3, 5, 3, generator=g, dtype=D).requires_grad_()
    fn = {"recon": dbn.loss_recon, "velocity": dbn.loss_velocity, "distcon": dbn.loss_distcon}[name]
    assert grad_check(lambda: fn(gt, pred), [pred]).passed


# --- model ------------------------------------------------------------------------------------


def test_zero_widths_rejected():
    with pytest.raises(ValueError):
        dbn.DbnModel(dbn.DbnConfig(hidden=0))
    with pytest.raises(ValueError):
        dbn.DbnModel(dbn.DbnConfig(layers=0))


def test_encode_step_is_causal():
    m = small_model()
    music, pos = torch.randn(6, 35, dtype=D), torch.randn(2, 6, 3, dtype=D)
    full = m.encode(music[None], pos[None])[0]
    for i in range(1, 6):
        assert torch.allclose(dbn.encode_step(m, music[:i], pos[:, :i]), full[:, i - 1], atol=1e-13)
    pos2 = pos.clone()
    pos2[:, 3:] += 50
    assert torch.equal(m.encode(music[None], pos2[None])[0, :, :3], full[:, :3])


def test_identity_embeddings_break_symmetry():
    m = small_model()
    music = torch.randn(1, 4, 35, dtype=D)
    pos = torch.randn(1, 2, 4, 3, dtype=D)
    swapped = pos[:, [1, 0]]
    a = m.encode(music, pos)[0]
    b = m.encode(music, swapped)[0]
    assert not torch.allclose(a[0], b[1])
    with torch.no_grad():
        m.identity[[0, 1]] = m.identity[[1, 0]].clone()
    c = m.encode(music, swapped)[0]
    assert torch.allclose(a[0], c[1], atol=1e-13) and torch.allclose(a[1], c[0], atol=1e-13)


def test_too_many_dancers_rejected():
    with pytest.raises(ValueError):
        small_model().encode(torch.zeros(1, 3, 35, dtype=D), torch.zeros(1, 4, 3, 3, dtype=D))


def test_decode_shape_and_purity():
    m = small_model()
    h = torch.randn(3, 8, dtype=D)
    cur = torch.randn(3, 3, dtype=D)
    out = dbn.decode_next(m, h, cur)
    assert out.shape == (3, 3) and torch.equal(out, dbn.decode_next(m, h, cur))


def test_decode_skip_starts_as_identity():
    m = small_model()
    h = torch.randn(2, 8, dtype=D)
    cur = torch.randn(2, 3, dtype=D)
    assert torch.allclose(dbn.decode_next(m, h, cur) - dbn.decode_next(m, h, 0 * cur), cur, atol=1e-14)


def test_gradient_reaches_music_mlp_input():
    m = small_model()
    music = torch.randn(3, 35, dtype=D, requires_grad=True)
    pos = torch.randn(2, 3, 3, dtype=D)
    dbn.decode_next(m, dbn.encode_step(m, music, pos), pos[:, -1]).sum().backward()
    assert music.grad.abs().sum() > 0


def test_rollout_two_frames_is_unrolled_definition():
    m = small_model()
    music = np.random.default_rng(5).normal(size=(2, 35))
    seed = np.random.default_rng(6).normal(size=(2, 3))
    traj = dbn.rollout(m, music, seed, smooth=False)
    expect = dbn.decode_next(m, dbn.encode_step(m, music[:1], seed[:, None]), seed).detach().numpy()
    assert np.array_equal(traj.positions[:, 0], seed)
    assert np.allclose(traj.positions[:, 1], expect, atol=1e-14)


def test_zero_decoder_and_skip_predict_origin():
    m = small_model()
    with torch.no_grad():
        for p in m.decoder.parameters():
            p.zero_()
        m.skip.zero_()
    seed = np.ones((2, 3))
    traj = dbn.rollout(m, np.zeros((6, 35)), seed, smooth=False)
    assert np.array_equal(traj.positions[:, 0], seed) and not traj.positions[:, 1:].any()


def test_zero_decoder_with_identity_skip_holds_position():
    m = small_model()
    with torch.no_grad():
        for p in m.decoder.parameters():
            p.zero_()
    seed = np.array([[1.0, 0, 2], [-1, 0, 0.5]])
    traj = dbn.rollout(m, np.zeros((5, 35)), seed, smooth=False)
    assert np.array_equal(traj.positions, np.repeat(seed[:, None], 5, axis=1))


def test_rollout_causal_in_music():
    m = small_model()
    music = np.random.default_rng(7).normal(size=(6, 35))
    seed = np.zeros((2, 3))
    full = dbn.rollout(m, music, seed, smooth=False).positions
    part = dbn.rollout(m, music[:4], seed, smooth=False).positions
    # frame i+1 depends on music up to frame i
    assert np.allclose(full[:, :4], part, atol=1e-14)


# --- training ------------------------------------------------------------------------------


def _toy_data(n=6, C=2, L=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, L, 35)), rng.normal(size=(n, C, L, 3))


def test_zero_lr_leaves_parameters():
    m = small_model()
    before = {k: v.clone() for k, v in m.state_dict().items() if not k.startswith("music_")}
    music, traj = _toy_data()
    dbn.train_dbn(m, music, traj, optim=dbn.OptimConfig(lr=0.0, epochs=1, batch_size=3))
    after = m.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_training_is_deterministic():
    music, traj = _toy_data()
    opt = dbn.OptimConfig(epochs=3, batch_size=4)
    a = dbn.train_dbn(small_model(1), music, traj, optim=opt, seed=9).curve
    b = dbn.train_dbn(small_model(1), music, traj, optim=opt, seed=9).curve
    assert a == b and len(a) == 3 and a[0]["epoch"] == 1


def test_training_reduces_loss_on_toy_data():
    music, traj = _toy_data(n=4)
    traj = np.cumsum(0.05 * traj, axis=2)
    res = dbn.train_dbn(small_model(2), music, traj, optim=dbn.OptimConfig(lr=3e-3, epochs=40, batch_size=4))
    assert res.curve[-1]["total"] < 0.5 * res.curve[0]["total"]


def test_gradient_clip_bounds_norm():
    m = small_model()
    for p in m.parameters():
        p.grad = torch.full_like(p, 10.0)
    dbn.clip_gradients(m, 1.0)
    norm = torch.sqrt(sum((p.grad**2).sum() for p in m.parameters()))
    assert float(norm) == pytest.approx(1.0, rel=1e-5)


def test_gradient_clip_rejects_non_finite():
    m = small_model()
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    next(m.parameters()).grad[...] = float("nan")
    with pytest.raises(NonFiniteError):
        dbn.clip_gradients(m, 1.0)
