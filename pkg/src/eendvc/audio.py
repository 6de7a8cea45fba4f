"""Single-channel 16 kHz linear PCM WAV I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


def read_wav(path: str | Path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono 16-bit PCM WAV file into float32 samples in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if rate != expected_rate:
        raise ValueError(f"{path}: expected {expected_rate} Hz audio, got {rate} Hz")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected single-channel audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return (data.astype(np.float32)) / 32768.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path: str | Path, waveform: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as mono 16-bit PCM."""
    waveform = np.asarray(waveform)
    if waveform.ndim != 1:
        raise ValueError(f"expected 1-D waveform, got shape {waveform.shape}")
    clipped = np.clip(waveform, -1.0, 1.0)
    wavfile.write(str(path), rate, (clipped * 32767.0).astype(np.int16))
