"""WAV I/O and the 35-column per-frame music feature.

Columns: envelope (1) | MFCC (20) | chroma (12) | peak one-hot (1) | beat one-hot (1).
Frame ``i`` is an STFT window centred on sample ``i * hop`` where
``hop = sample_rate / fps``, so feature frames line up with motion frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import MagicError, TruncatedError, UnsupportedCodecError

N_FFT = 1024
N_MELS = 64
N_MFCC = 20
LOG_FLOOR = 1e-10
FEATURE_DIM = 35

ENVELOPE_COL = 0
MFCC_COLS = slice(1, 21)
CHROMA_COLS = slice(21, 33)
PEAK_COL = 33
BEAT_COL = 34


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio clip must be a non-empty mono signal")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MusicFeatureSequence:
    frames: np.ndarray  # (L, 35)
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != FEATURE_DIM:
            raise ValueError(f"music features must be (L, {FEATURE_DIM}), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def beats(self) -> np.ndarray:
        return self.frames[:, BEAT_COL]


# ---------------------------------------------------------------------------
# WAV


def write_wav(clip: AudioClip) -> bytes:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    return b"RIFF" + struct.pack("<I", len(body)) + body


def parse_wav(data: bytes) -> AudioClip:
    """Read a PCM16 RIFF/WAVE file; stereo is averaged to mono."""
    if len(data) < 12:
        raise TruncatedError("file shorter than the RIFF header")
    if data[:4] != b"RIFF":
        raise MagicError(b"RIFF", data[:4])
    if data[8:12] != b"WAVE":
        raise MagicError(b"WAVE", data[8:12])
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        pos += 8
        if cid == b"fmt ":
            if pos + 16 > len(data):
                raise TruncatedError("fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", data, pos)
        elif cid == b"data":
            if fmt is None:
                raise UnsupportedCodecError("data chunk before fmt chunk")
            codec, channels, rate, _, _, bits = fmt
            if codec != 1 or bits != 16:
                raise UnsupportedCodecError(f"only PCM16 is supported (codec {codec}, {bits} bits)")
            if channels not in (1, 2):
                raise UnsupportedCodecError(f"unsupported channel count {channels}")
            if pos + size > len(data):
                raise TruncatedError(f"data chunk declares {size} bytes, {len(data) - pos} present")
            frame_bytes = 2 * channels
            pcm = np.frombuffer(data, dtype="<i2", count=size // 2, offset=pos)
            pcm = pcm[: (size // frame_bytes) * channels].reshape(-1, channels)
            samples = pcm.astype(np.float64).mean(axis=1) / 32768.0
            return AudioClip(samples, rate)
        pos += size + (size & 1)
    raise TruncatedError("no data chunk found")


def read_wav_file(path) -> AudioClip:
    with open(path, "rb") as fh:
        return parse_wav(fh.read())


def write_wav_file(path, clip: AudioClip) -> None:
    with open(path, "wb") as fh:
        fh.write(write_wav(clip))


def click_track(
    bpm: float,
    duration: float,
    sample_rate: int = 22050,
    first_beat: float = 0.0,
    amplitude: float = 0.8,
) -> tuple[AudioClip, np.ndarray]:
    """Decaying 1 kHz clicks on a constant beat grid; returns (clip, click times)."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    times = np.arange(first_beat, duration, 60.0 / bpm)
    burst_len = int(0.01 * sample_rate)
    t = np.arange(burst_len) / sample_rate
    burst = amplitude * np.sin(2 * np.pi * 1000.0 * t) * np.exp(-t / 0.003)
    for tb in times:
        s = int(round(tb * sample_rate))
        seg = burst[: max(0, min(burst_len, n - s))]
        out[s : s + seg.size] += seg
    return AudioClip(out, sample_rate), times


# ---------------------------------------------------------------------------
# spectral front end


def hop_length(sample_rate: int, fps: float) -> int:
    return int(round(sample_rate / fps))


def stft_magnitude(clip: AudioClip, fps: float) -> np.ndarray:
    """(L, N_FFT//2+1) magnitude frames, L = len(samples) // hop."""
    if clip.samples.size < N_FFT:
        raise ValueError(f"clip has {clip.samples.size} samples; need at least {N_FFT}")
    hop = hop_length(clip.sample_rate, fps)
    n_frames = clip.samples.size // hop
    padded = np.pad(clip.samples, (N_FFT // 2, N_FFT // 2))
    idx = np.arange(n_frames)[:, None] * hop + np.arange(N_FFT)[None, :]
    window = np.hanning(N_FFT + 1)[:-1]
    return np.abs(np.fft.rfft(padded[idx] * window, axis=1))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_mels: int = N_MELS, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular (peak 1) filters spaced on the mel scale from 0 to Nyquist."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def onset_envelope(clip: AudioClip, fps: float) -> np.ndarray:
    """Positive mel-weighted spectral flux; frame 0 has no predecessor and is 0."""
    mel = stft_magnitude(clip, fps) @ mel_filterbank(clip.sample_rate).T
    flux = np.zeros(mel.shape[0])
    flux[1:] = np.maximum(0.0, np.diff(mel, axis=0)).mean(axis=1)
    return flux


def mfcc(clip: AudioClip, fps: float, n: int = N_MFCC) -> np.ndarray:
    power = stft_magnitude(clip, fps) ** 2
    mel = power @ mel_filterbank(clip.sample_rate).T
    return dct(np.log(np.maximum(mel, LOG_FLOOR)), type=2, norm="ortho", axis=1)[:, :n]


def chroma(clip: AudioClip, fps: float) -> np.ndarray:
    """Bin energies folded onto 12 pitch classes (C=0 ... A=9, B=11)."""
    power = stft_magnitude(clip, fps) ** 2
    freqs = np.arange(power.shape[1]) * clip.sample_rate / N_FFT
    valid = freqs >= 27.5  # below A0 the pitch mapping is meaningless
    midi = 69.0 + 12.0 * np.log2(freqs[valid] / 440.0)
    pc = np.round(midi).astype(int) % 12
    fold = np.zeros((power.shape[1], 12))
    fold[np.flatnonzero(valid), pc] = 1.0
    out = power @ fold
    peak = out.max(axis=1, keepdims=True)
    return np.divide(out, peak, out=np.zeros_like(out), where=peak > 0)


# ---------------------------------------------------------------------------
# peaks and beats


def _pick_peaks(env: np.ndarray, fps: float) -> list[int]:
    L = env.size
    thresh = env.mean() + env.std()
    cands = [
        i for i in range(1, L - 1)
        if env[i] > env[i - 1] and env[i] >= env[i + 1] and env[i] > thresh
    ]
    min_sep = 0.25 * fps
    kept: list[int] = []
    for i in sorted(cands, key=lambda i: (-env[i], i)):
        if all(abs(i - k) >= min_sep for k in kept):
            kept.append(i)
    return sorted(kept)


def best_beat_grid(env: np.ndarray, fps: float) -> tuple[float, np.ndarray]:
    """Exhaustive 60-180 BPM (1 BPM steps) x integer-phase search; returns (bpm, grid frames)."""
    L = env.size
    best = (-np.inf, 0.0, np.empty(0, dtype=int))
    for bpm in range(60, 181):
        period = 60.0 * fps / bpm
        for phase in range(int(np.ceil(period))):
            grid = np.round(phase + period * np.arange(int((L - 1 - phase) / period) + 1)).astype(int)
            grid = grid[grid < L]
            score = env[grid].sum()
            if score > best[0]:
                best = (score, float(bpm), grid)
    return best[1], best[2]


def detect_peaks_beats(envelope, fps: float) -> tuple[np.ndarray, np.ndarray]:
    """One-hot peak and beat columns from an onset envelope.

    Beats are the detected peaks snapped to the best constant-tempo grid;
    a peak further than a quarter period from every grid point is dropped.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if env.ndim != 1 or env.size < 3:
        raise ValueError("envelope needs at least 3 frames")
    peaks = np.zeros(env.size)
    beats = np.zeros(env.size)
    picked = _pick_peaks(env, fps)
    if not picked:
        return peaks, beats
    peaks[picked] = 1.0
    bpm, grid = best_beat_grid(env, fps)
    tol = 0.25 * 60.0 * fps / bpm
    for p in picked:
        g = grid[np.argmin(np.abs(grid - p))]
        if abs(g - p) <= tol:
            beats[g] = 1.0
    return peaks, beats


def extract_features(clip: AudioClip, fps: float = 30.0) -> MusicFeatureSequence:
    env = onset_envelope(clip, fps)
    peaks, beats = detect_peaks_beats(env, fps)
    frames = np.column_stack([env, mfcc(clip, fps), chroma(clip, fps), peaks, beats])
    return MusicFeatureSequence(frames, fps)
