import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupchoreo import audio
from groupchoreo.errors import MagicError, TruncatedError, UnsupportedCodecError

SR = 22050
FPS = 30.0


def sine(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return audio.AudioClip(amp * np.sin(2 * np.pi * freq * t), SR)


# --- WAV --------------------------------------------------------------------------


def test_wav_roundtrip_exact_on_pcm_grid():
    pcm = np.random.default_rng(0).integers(-32768, 32767, size=1000)
    clip = audio.AudioClip(pcm / 32768.0, 16000)
    back = audio.parse_wav(audio.write_wav(clip))
    assert back.sample_rate == 16000
    assert np.array_equal(back.samples, clip.samples)


def _stereo_wav(left, right, rate=8000):
    pcm = np.stack([left, right], axis=1).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 2, rate, rate * 4, 4, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_stereo_is_channel_mean():
    clip = audio.parse_wav(_stereo_wav(np.array([100, -200, 300]), np.array([300, 0, -300])))
    assert np.array_equal(clip.samples * 32768, [200, -100, 0])


def test_wav_errors_are_distinct():
    good = audio.write_wav(audio.AudioClip(np.zeros(10), 8000))
    with pytest.raises(MagicError) as exc:
        audio.parse_wav(b"RIFX" + good[4:])
    assert exc.value.expected == b"RIFF" and exc.value.actual == b"RIFX"
    with pytest.raises(TruncatedError):
        audio.parse_wav(good[:-4])
    with pytest.raises(TruncatedError):
        audio.parse_wav(good[:6])
    float_fmt = good.replace(struct.pack("<HH", 1, 1), struct.pack("<HH", 3, 1), 1)
    with pytest.raises(UnsupportedCodecError):
        audio.parse_wav(float_fmt)


# --- spectral front end ---------------------------------------------------------------


def test_hop_matches_motion_rate():
    assert audio.hop_length(22050, 30) == 735
    clip = audio.AudioClip(np.zeros(SR * 2), SR)
    assert audio.stft_magnitude(clip, FPS).shape == (60, 513)


def test_stft_frame_matches_direct_dft():
    clip = audio.AudioClip(np.random.default_rng(1).normal(size=5000), SR)
    mag = audio.stft_magnitude(clip, FPS)
    padded = np.concatenate([np.zeros(512), clip.samples, np.zeros(512)])
    n = np.arange(1024)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / 1024)
    k = 3
    frame = padded[k * 735 : k * 735 + 1024] * window
    basis = np.exp(-2j * np.pi * np.outer(np.arange(513), n) / 1024)
    assert np.allclose(mag[k], np.abs(basis @ frame), atol=1e-9)


def test_mel_filters_peak_at_one_and_cover_band():
    fb = audio.mel_filterbank(SR)
    assert fb.shape == (64, 513)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0 + 1e-12)
    # centres are mel-equispaced: the argmax of each filter increases monotonically
    assert np.all(np.diff(fb.argmax(axis=1)) >= 0)
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    edges = 700 * (10 ** (np.linspace(0, mel(SR / 2), 66) / 2595) - 1)
    freqs = np.arange(513) * SR / 1024
    j = 40
    inside = (freqs > edges[j]) & (freqs < edges[j + 2])
    assert np.all(fb[j, inside] > 0) and np.all(fb[j, ~inside] == 0)


def test_silence_rows():
    feats = audio.extract_features(audio.AudioClip(np.zeros(SR), SR), FPS).frames
    assert feats.shape == (30, 35)
    mfcc_col0 = np.sqrt(64) * np.log(1e-10)  # DCT-II (ortho) of a constant vector
    expect = np.zeros(35)
    expect[1] = mfcc_col0
    assert np.allclose(feats, expect, atol=1e-9)


def test_mfcc_matches_explicit_dct_matrix():
    clip = sine(440.0, 0.5)
    power = audio.stft_magnitude(clip, FPS) ** 2
    logmel = np.log(np.maximum(power @ audio.mel_filterbank(SR).T, 1e-10))
    N = 64
    n, k = np.arange(N), np.arange(20)[:, None]
    D = np.sqrt(2 / N) * np.cos(np.pi * k * (2 * n + 1) / (2 * N))
    D[0] /= np.sqrt(2)
    assert np.allclose(audio.mfcc(clip, FPS), logmel @ D.T, atol=1e-9)


@pytest.mark.parametrize("freq,pc", [(440.0, 9), (261.63, 0), (392.0, 7), (493.88, 11)])
def test_chroma_peaks_at_pitch_class(freq, pc):
    ch = audio.chroma(sine(freq), FPS)
    assert np.all(ch[5:-5].argmax(axis=1) == pc)
    assert np.allclose(ch[5:-5].max(axis=1), 1.0)


def test_onset_envelope_nonnegative_and_steady_state():
    # 450 Hz completes a whole number of cycles per 735-sample hop, so every
    # window fully inside the tone sees the same spectrum
    env = audio.onset_envelope(sine(450.0), FPS)
    assert env[0] == 0 and np.all(env >= 0)
    assert env[1] > 0.1
    assert np.all(env[2:-2] < 1e-9 * env.max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_features_binary_columns_and_width(seed):
    x = np.random.default_rng(seed).normal(scale=0.2, size=SR // 2)
    f = audio.extract_features(audio.AudioClip(x, SR), FPS).frames
    assert f.shape[1] == 35 and np.all(f[:, 0] >= 0)
    assert set(np.unique(f[:, 33:35])) <= {0.0, 1.0}


def test_features_are_deterministic():
    clip, _ = audio.click_track(100, 3.0)
    a = audio.extract_features(clip, FPS).frames
    b = audio.extract_features(audio.AudioClip(clip.samples.copy(), SR), FPS).frames
    assert np.array_equal(a, b)


# --- peaks and beats --------------------------------------------------------------------


def test_peak_picking_separation_and_threshold():
    env = np.zeros(60)
    env[[10, 12, 30, 45]] = [1.0, 0.9, 0.8, 0.05]
    # 12 is within 0.25 s (7.5 frames) of the taller 10; 45 is below mean + std
    assert audio._pick_peaks(env, 30.0) == [10, 30]


def test_beat_grid_recovers_period_and_phase():
    env = np.zeros(120)
    env[7::15] = 1.0  # 120 BPM at 30 fps, phase 7
    bpm, grid = audio.best_beat_grid(env, 30.0)
    assert bpm == 120.0
    assert list(grid) == list(range(7, 120, 15))


def test_beats_snap_to_grid():
    env = np.zeros(120)
    env[7::15] = 1.0
    env[52] = 0.0
    env[53] = 0.9  # one frame late against the 7 + 15k grid
    peaks, beats = audio.detect_peaks_beats(env, 30.0)
    assert peaks[53] == 1 and beats[52] == 1 and beats[53] == 0


def test_flat_envelope_has_no_beats():
    peaks, beats = audio.detect_peaks_beats(np.ones(50), 30.0)
    assert not peaks.any() and not beats.any()


def test_click_track_beats_match_column_composition():
    clip, times = audio.click_track(120, 4.0, first_beat=0.2)
    feats = audio.extract_features(clip, FPS)
    _, beats = audio.detect_peaks_beats(feats.frames[:, 0], FPS)
    assert np.array_equal(feats.beats, beats)
    found = np.flatnonzero(feats.beats)
    expect = np.round(times * FPS).astype(int)
    assert len(found) == len(expect)
    assert np.abs(found - expect).max() <= 1


@pytest.mark.parametrize("bpm", [72, 96, 128, 150])
def test_click_track_tempo_recovered(bpm):
    clip, times = audio.click_track(bpm, 6.0, first_beat=0.1)
    env = audio.onset_envelope(clip, FPS)
    found, _ = audio.best_beat_grid(env, FPS)
    # integer-BPM grids alias to within a frame over 6 s
    assert abs(found - bpm) <= 2
