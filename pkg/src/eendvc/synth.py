"""Deterministic synthetic conversation scenes for desk-scale runs.

Each speaker is a harmonic-plus-noise source with its own fundamental
frequency band, speaking-rate multiplier, and pause habits, so different
"age groups" of voices are spectrally distinct and the toy embedding
extractor separates them by construction. Generated reference annotations
match the rendered activity exactly (both live on a millisecond grid).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .timeline import Annotation, Segment

SAMPLE_RATE = 16000

# Fundamental frequency bands in Hz per age group of synthetic voices.
AGE_BANDS = {
    "adult": (85.0, 180.0),
    "older-adult": (70.0, 150.0),
    "child-adult": (250.0, 400.0),
}


@dataclass(frozen=True)
class VoiceSpec:
    """Parameters of one synthetic voice.

    ``harmonics`` fixes the voice's spectral envelope (amplitude per
    harmonic); it is what makes two voices with nearby fundamentals still
    separable by spectral statistics, the way formants separate real
    speakers."""

    f0: float
    rate: float = 1.0
    pause_probability: float = 0.3
    harmonics: tuple[float, ...] = tuple(1.0 / (h + 1) ** 0.5 for h in range(12))

    def __post_init__(self):
        if self.f0 <= 0:
            raise ValueError(f"fundamental frequency must be positive, got {self.f0}")
        if not 0 <= self.pause_probability <= 1:
            raise ValueError(
                f"pause probability must lie in [0, 1], got {self.pause_probability}"
            )
        if not self.harmonics or min(self.harmonics) < 0:
            raise ValueError("harmonics must be a non-empty tuple of non-negative weights")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for one synthetic multi-speaker scene."""

    uri: str = "scene"
    num_speakers: int = 2
    duration: float = 120.0
    turn_min: float = 2.0
    turn_max: float = 5.0
    overlap_fraction: float = 0.1
    gap_min: float = 0.25
    gap_max: float = 0.9
    age_group: str = "adult"
    voices: tuple[VoiceSpec, ...] | None = None
    seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError(f"num_speakers must be >= 1, got {self.num_speakers}")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError(
                f"overlap fraction must lie in [0, 1), got {self.overlap_fraction}"
            )
        if not 0 < self.turn_min <= self.turn_max:
            raise ValueError("need 0 < turn_min <= turn_max")
        if self.duration < 2 * self.turn_max:
            raise ValueError("scene duration too short for the turn length range")
        if self.age_group not in AGE_BANDS:
            raise ValueError(
                f"unknown age group {self.age_group!r}; known: {sorted(AGE_BANDS)}"
            )
        if self.voices is not None and len(self.voices) != self.num_speakers:
            raise ValueError("voices, when given, must match num_speakers")


def default_voices(num_speakers: int, age_group: str) -> tuple[VoiceSpec, ...]:
    """Canonical voice roster for an age group.

    Deterministic: every scene of the same (age group, speaker count) reuses
    the same voices, so held-out scenes are new conversations by familiar
    voices rather than unseen speakers. Fundamentals spread geometrically
    across the age band and each voice carries a fixed harmonic envelope."""
    lo, hi = AGE_BANDS[age_group]
    voices = []
    for i in range(num_speakers):
        profile = np.random.default_rng(
            zlib.crc32(f"{age_group}/{num_speakers}/{i}".encode())
        )
        if num_speakers == 1:
            position = 0.5
        else:
            position = 0.1 + 0.8 * i / (num_speakers - 1)
        f0 = lo * (hi / lo) ** position
        tilt = profile.uniform(0.3, 1.2)
        base = 1.0 / np.arange(1, 13) ** tilt
        envelope = base * profile.uniform(0.1, 2.0, size=12)
        voices.append(
            VoiceSpec(
                f0=round(f0, 1),
                rate=round(float(profile.uniform(0.85, 1.15)), 3),
                pause_probability=round(float(profile.uniform(0.2, 0.4)), 3),
                harmonics=tuple(round(float(a), 4) for a in envelope),
            )
        )
    return tuple(voices)


def _quantize(t: float) -> float:
    return round(t, 3)


def _schedule_turns(
    spec: SyntheticSceneSpec, voices: tuple[VoiceSpec, ...], rng: np.random.Generator
) -> list[tuple[float, float, int]]:
    """(start, end, speaker) turn list on a millisecond grid.

    At most two speakers are ever concurrent: a turn may only overlap the
    immediately preceding turn of a different speaker, and never reaches
    back past the end of any earlier turn."""
    mean_pause = float(np.mean([v.pause_probability for v in voices]))
    # Overlap is only injected on non-pause transitions; compensate so the
    # realized overlap-to-speech ratio lands near the requested fraction.
    effective = min(0.8, spec.overlap_fraction / max(1e-9, 1.0 - mean_pause))

    turns: list[tuple[float, float, int]] = []
    last_end_per_speaker = [0.0] * spec.num_speakers
    prev_speaker = -1
    prev_start = prev_end = float(rng.uniform(0.2, 0.8))
    earlier_end = 0.0  # latest end among all turns except the previous one

    while True:
        if spec.num_speakers == 1:
            speaker = 0
        else:
            choices = [s for s in range(spec.num_speakers) if s != prev_speaker]
            speaker = int(rng.choice(choices))
        length = float(rng.uniform(spec.turn_min, spec.turn_max)) * voices[speaker].rate

        if not turns:
            start = prev_end
        else:
            pause = rng.random() < voices[prev_speaker].pause_probability
            if spec.overlap_fraction > 0 and not pause and speaker != prev_speaker:
                overlap = min(
                    effective * length, 0.5 * (prev_end - prev_start), 0.8 * length
                )
                start = prev_end - overlap
            else:
                start = prev_end + float(rng.uniform(spec.gap_min, spec.gap_max))
            start = max(start, earlier_end, last_end_per_speaker[speaker])

        start = _quantize(start)
        end = _quantize(min(start + length, spec.duration))
        if end - start < 0.25 or start >= spec.duration:
            break
        turns.append((start, end, speaker))
        earlier_end = max(earlier_end, prev_end)
        prev_speaker, prev_start, prev_end = speaker, start, end
        last_end_per_speaker[speaker] = end

    return turns


def _render_turn(
    length: int, voice: VoiceSpec, rng: np.random.Generator, sample_rate: int
) -> np.ndarray:
    t = np.arange(length) / sample_rate
    f0 = voice.f0 * (1.0 + 0.003 * float(rng.standard_normal()))
    # Slow, shallow vibrato keeps the source quasi-stationary.
    vibrato = 1.0 + 0.002 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi))
    phase_base = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    signal = np.zeros(length)
    weight_total = 0.0
    for h, weight in enumerate(voice.harmonics, start=1):
        if h * f0 >= 7000.0:
            break
        signal += weight * np.sin(h * phase_base + rng.uniform(0, 2 * np.pi))
        weight_total += weight
    signal /= max(weight_total, 1e-9)
    signal += 0.01 * rng.standard_normal(length)

    amplitude = 0.22 * (1.0 + 0.08 * float(np.clip(rng.standard_normal(), -2, 2)))
    ramp = min(160, length // 4)  # 10 ms raised-cosine edges
    envelope = np.ones(length)
    if ramp > 0:
        fade = 0.5 * (1 - np.cos(np.linspace(0, np.pi, ramp)))
        envelope[:ramp] = fade
        envelope[-ramp:] = fade[::-1]
    return amplitude * envelope * signal


def generate_scene(spec: SyntheticSceneSpec) -> tuple[np.ndarray, Annotation]:
    """Render one scene; byte-identical outputs for identical specs.

    Returns (float32 waveform, reference annotation). Silence between turns
    is exactly zero."""
    rng = np.random.default_rng(spec.seed)
    voices = spec.voices or default_voices(spec.num_speakers, spec.age_group)
    turns = _schedule_turns(spec, voices, rng)

    num_samples = int(round(spec.duration * spec.sample_rate))
    waveform = np.zeros(num_samples, dtype=np.float64)
    entries = []
    for start, end, speaker in turns:
        i0 = int(round(start * spec.sample_rate))
        i1 = int(round(end * spec.sample_rate))
        waveform[i0:i1] += _render_turn(i1 - i0, voices[speaker], rng, spec.sample_rate)
        entries.append((Segment(start, end), f"spk{speaker:02d}"))
    waveform = np.clip(waveform, -0.95, 0.95).astype(np.float32)
    return waveform, Annotation(spec.uri, tuple(entries))


def scene_variant(spec: SyntheticSceneSpec, index: int, prefix: str = "scene") -> SyntheticSceneSpec:
    """Derive the spec for the index-th scene of a batch: fresh uri and seed."""
    return replace(spec, uri=f"{prefix}{index:03d}", seed=spec.seed + index)
