"""Audio front-end: STFT, mel warp, frame stacking, calibrated noise mixing.

The pipeline turns a 16 kHz waveform into a sequence of 240-wide feature
vectors: 25 ms frames with 10 ms stride -> 1024-point FFT magnitudes ->
30 mel bins (80 Hz .. 11025 Hz) -> natural log -> windows of 8 consecutive
frames hopped by 3.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms at 16 kHz
HOP = 160  # 10 ms
N_FFT = 1024
N_FREQ = N_FFT // 2 + 1  # 513 one-sided bins
N_MELS = 30
MEL_FMIN = 80.0
MEL_FMAX = 11025.0
LOG_FLOOR = 1e-10
STACK_W = 8  # frames per stacked window
STACK_HOP = 3  # window shift, 5 frames of overlap
FEATURE_DIM = STACK_W * N_MELS  # 240


@dataclass
class Waveform:
    samples: np.ndarray  # float values in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)


def _check_rate(w: Waveform):
    if w.sample_rate != SAMPLE_RATE:
        raise InputError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_magnitude(w: Waveform) -> np.ndarray:
    """One-sided STFT magnitudes, shape (num_frames, 513).

    400-sample frames, hop 160, periodic Hann window, 1024-point FFT.
    num_frames = floor((len - 400) / 160) + 1.
    """
    _check_rate(w)
    x = w.samples
    if len(x) < FRAME_LEN:
        raise InputError(
            f"waveform too short: {len(x)} samples, need at least {FRAME_LEN}"
        )
    n_frames = (len(x) - FRAME_LEN) // HOP + 1
    idx = np.arange(FRAME_LEN)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_periodic(FRAME_LEN)
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels=N_MELS, n_freq=N_FREQ, fmin=MEL_FMIN, fmax=MEL_FMAX
) -> np.ndarray:
    """Triangular filters, edges equally spaced on the mel scale. Shape (n_mels, n_freq).

    Note fmax may exceed Nyquist; filters supported entirely above Nyquist
    come out all-zero and their log-mel outputs sit at the floor.
    """
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_freq) * SAMPLE_RATE / N_FFT
    fb = np.zeros((n_mels, n_freq))
    for k in range(n_mels):
        lo, ctr, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        up = (bin_hz - lo) / (ctr - lo)
        down = (hi - bin_hz) / (hi - ctr)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FILTERBANK = mel_filterbank()


def mel_warp(spec: np.ndarray) -> np.ndarray:
    """Apply the 30-filter mel warp to STFT magnitudes, then a floored log."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2 or spec.shape[1] != N_FREQ:
        raise InputError(f"expected (T, {N_FREQ}) spectrogram, got {spec.shape}")
    mel = spec @ _FILTERBANK.T
    return np.log(np.maximum(mel, LOG_FLOOR))


def stack_frames(mel: np.ndarray) -> np.ndarray:
    """Concatenate windows of 8 mel frames hopped by 3 into (N, 240) vectors."""
    mel = np.asarray(mel)
    t = mel.shape[0]
    if t < STACK_W:
        raise InputError(f"need at least {STACK_W} mel frames, got {t}")
    n = (t - STACK_W) // STACK_HOP + 1
    out = np.empty((n, FEATURE_DIM), dtype=mel.dtype)
    for i in range(n):
        out[i] = mel[i * STACK_HOP : i * STACK_HOP + STACK_W].reshape(-1)
    return out


def featurize(w: Waveform) -> np.ndarray:
    """Full front-end: waveform -> (N, 240) stacked log-mel features."""
    return stack_frames(mel_warp(stft_magnitude(w)))


def num_stft_frames(n_samples: int) -> int:
    return (n_samples - FRAME_LEN) // HOP + 1


def num_feature_vectors(n_samples: int) -> int:
    return (num_stft_frames(n_samples) - STACK_W) // STACK_HOP + 1


def mix_noise(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Scale and add noise so the clean/noise power ratio hits ``snr_db``.

    Noise is tiled/cropped to the clean length; powers are mean squares over
    the overlapped region. Output is clipped to [-1, 1] with a warning when
    more than 1% of samples clip.
    """
    if clean.sample_rate != noise.sample_rate:
        raise InputError(
            f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}"
        )
    n = len(clean.samples)
    nz = noise.samples
    if len(nz) < n:
        nz = np.tile(nz, -(-n // len(nz)))
    nz = nz[:n]
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(nz**2))
    if p_clean <= 0.0:
        raise InputError("silent clean input: SNR undefined")
    if p_noise <= 0.0:
        raise InputError("silent noise input: SNR undefined")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples + scale * nz
    clipped = np.abs(mixed) > 1.0
    if clipped.mean() > 0.01:
        warnings.warn(
            f"mix_noise: {clipped.mean():.1%} of samples clipped at snr {snr_db} dB"
        )
    return Waveform(np.clip(mixed, -1.0, 1.0), clean.sample_rate)


def measured_snr_db(clean: Waveform, mixed: Waveform) -> float:
    """SNR of (clean, mixed - clean) in dB; the calibration oracle."""
    residual = mixed.samples - clean.samples
    return 10.0 * np.log10(np.mean(clean.samples**2) / np.mean(residual**2))


def pink_noise(n: int, rng) -> np.ndarray:
    """Deterministic unit-RMS 1/f noise from the given Rng."""
    white = rng.normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    spec[1:] /= np.sqrt(freqs[1:])
    spec[0] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / np.sqrt(np.mean(x**2))
