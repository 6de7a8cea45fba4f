"""Frame-level spectral features shared by the toy encoder, the toy
embedding extractor, and nothing else. 20 ms non-overlapping frames at
16 kHz, magnitude spectra on a mel grid."""

from __future__ import annotations

import functools

import numpy as np

SAMPLE_RATE = 16000
FRAME_LENGTH = 320  # 20 ms at 16 kHz
N_FFT = 512
N_MELS = 40


def frame_signal(waveform: np.ndarray, frame_length: int = FRAME_LENGTH) -> np.ndarray:
    """Split a 1-D signal into non-overlapping frames, zero-padding the tail.

    Returns an array of shape (num_frames, frame_length) where
    num_frames = ceil(len(waveform) / frame_length).
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise ValueError(f"expected 1-D waveform, got shape {waveform.shape}")
    if waveform.size == 0:
        raise ValueError("empty waveform")
    num_frames = -(-waveform.size // frame_length)
    padded = np.zeros(num_frames * frame_length, dtype=np.float64)
    padded[: waveform.size] = waveform
    return padded.reshape(num_frames, frame_length)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(
    num_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float = 8000.0,
) -> np.ndarray:
    """Triangular mel filterbank, shape (num_mels, n_fft // 2 + 1)."""
    num_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, num_bins)
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), num_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bank = np.zeros((num_mels, num_bins), dtype=np.float64)
    for m in range(num_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def mel_magnitudes(
    waveform: np.ndarray,
    frame_length: int = FRAME_LENGTH,
    n_fft: int = N_FFT,
    num_mels: int = N_MELS,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Mel-weighted magnitude spectra per frame, shape (num_frames, num_mels).

    Purely linear in the spectral magnitudes (no log compression), so an
    all-zero input produces an all-zero output.
    """
    frames = frame_signal(waveform, frame_length)
    window = np.hanning(frame_length)
    spectra = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))
    bank = mel_filterbank(num_mels, n_fft, sample_rate)
    return spectra @ bank.T
