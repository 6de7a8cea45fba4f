"""Temporal data model for diarization: segments, speaker-labeled
annotations, frame discretization, and RTTM text I/O.

Times are real seconds. RTTM rendering is fixed at millisecond precision
and parsing quantizes to the same grid, so parse/serialize round-trips are
exact for annotations living on that grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

RTTM_DECIMALS = 3


class RTTMParseError(ValueError):
    """Malformed RTTM input; carries the offending line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class Segment:
    """Half-open time interval [start, end) in seconds; always non-empty."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"segment bounds must be finite, got ({self.start}, {self.end})")
        if self.start < 0:
            raise ValueError(f"segment start must be non-negative, got {self.start}")
        if self.end <= self.start:
            raise ValueError(f"segment end must exceed start, got ({self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def intersection(self, other: "Segment") -> "Segment | None":
        start = max(self.start, other.start)
        end = min(self.end, other.end)
        if end <= start:
            return None
        return Segment(start, end)

    def contains_time(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class SpeakerTimelineStats:
    """Aggregate speech statistics for one annotation.

    total_speech counts speaker-time (overlapping speakers each contribute),
    overlap_duration counts wall-clock time with two or more active speakers.
    """

    total_speech: float
    overlap_duration: float
    speaker_count: int


@dataclass(frozen=True)
class Annotation:
    """Speaker-labeled timeline for one recording.

    Entries are stored sorted by (start, end, label) with exact duplicates
    removed. Overlapping segments with distinct labels are first-class.
    """

    uri: str
    entries: tuple[tuple[Segment, str], ...] = ()

    def __post_init__(self):
        normalized = tuple(
            sorted(set(self.entries), key=lambda e: (e[0].start, e[0].end, e[1]))
        )
        object.__setattr__(self, "entries", normalized)

    def __iter__(self) -> Iterator[tuple[Segment, str]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def labels(self) -> tuple[str, ...]:
        return tuple(sorted({label for _, label in self.entries}))

    def crop(self, window: Segment) -> "Annotation":
        """Intersect every entry with ``window`` and re-express times
        relative to the window start; entries with empty intersection drop."""
        cropped = []
        for seg, label in self.entries:
            inter = seg.intersection(window)
            if inter is not None:
                cropped.append(
                    (Segment(inter.start - window.start, inter.end - window.start), label)
                )
        return Annotation(self.uri, tuple(cropped))

    def discretize(
        self,
        frame_duration: float,
        num_frames: int,
        speaker_order: Sequence[str],
    ) -> np.ndarray:
        """Binary activity matrix of shape (num_frames, len(speaker_order)).

        Cell (t, s) is 1 iff speaker s is active at the frame center time
        (t + 0.5) * frame_duration, with segment membership half-open.
        """
        if frame_duration <= 0:
            raise ValueError(f"frame duration must be positive, got {frame_duration}")
        if num_frames < 0:
            raise ValueError(f"num_frames must be non-negative, got {num_frames}")
        index = {label: j for j, label in enumerate(speaker_order)}
        if len(index) != len(speaker_order):
            raise ValueError("speaker_order contains duplicate labels")
        activity = np.zeros((num_frames, len(speaker_order)), dtype=np.int8)
        centers = (np.arange(num_frames) + 0.5) * frame_duration
        for seg, label in self.entries:
            if label not in index:
                raise ValueError(f"label {label!r} not covered by speaker_order")
            mask = (centers >= seg.start) & (centers < seg.end)
            activity[mask, index[label]] = 1
        return activity

    def stats(self) -> SpeakerTimelineStats:
        if not self.entries:
            return SpeakerTimelineStats(0.0, 0.0, 0)
        boundaries = sorted({t for seg, _ in self.entries for t in (seg.start, seg.end)})
        total = 0.0
        overlap = 0.0
        for t0, t1 in zip(boundaries[:-1], boundaries[1:]):
            mid = 0.5 * (t0 + t1)
            active = {label for seg, label in self.entries if seg.contains_time(mid)}
            if active:
                total += len(active) * (t1 - t0)
                if len(active) >= 2:
                    overlap += t1 - t0
        return SpeakerTimelineStats(total, overlap, len(self.labels()))


def parse_rttm(source: str | Iterable[str]) -> dict[str, Annotation]:
    """Parse RTTM text into one Annotation per recording uri.

    Accepts a string or an iterable of lines. Blank lines and ";;" / "#"
    comment lines are skipped. Times are quantized to milliseconds.
    """
    lines = source.splitlines() if isinstance(source, str) else source
    per_uri: dict[str, list[tuple[Segment, str]]] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith(";;") or line.startswith("#"):
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            raise RTTMParseError(f"expected SPEAKER record, got {fields[0]!r}", number)
        if len(fields) < 9:
            raise RTTMParseError(f"expected at least 9 fields, got {len(fields)}", number)
        try:
            tbeg = float(fields[3])
            tdur = float(fields[4])
        except ValueError:
            raise RTTMParseError(
                f"invalid time fields {fields[3]!r} / {fields[4]!r}", number
            ) from None
        if not (math.isfinite(tbeg) and math.isfinite(tdur)):
            raise RTTMParseError("non-finite time fields", number)
        if tdur <= 0:
            raise RTTMParseError(f"non-positive duration {fields[4]}", number)
        start = round(tbeg, RTTM_DECIMALS)
        end = round(tbeg + tdur, RTTM_DECIMALS)
        try:
            segment = Segment(start, end)
        except ValueError as exc:
            raise RTTMParseError(str(exc), number) from None
        per_uri.setdefault(fields[1], []).append((segment, fields[7]))
    return {uri: Annotation(uri, tuple(entries)) for uri, entries in per_uri.items()}


def serialize_rttm(annotations: Annotation | Iterable[Annotation]) -> str:
    """Render annotations as RTTM text, times at millisecond precision.

    Line format: ``SPEAKER <uri> 1 <tbeg> <tdur> <NA> <NA> <speaker> <NA> <NA>``.
    """
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    parts = []
    for ann in annotations:
        if any(ch.isspace() for ch in ann.uri) or not ann.uri:
            raise ValueError(f"uri {ann.uri!r} not representable in RTTM")
        for seg, label in ann.entries:
            if any(ch.isspace() for ch in label) or not label:
                raise ValueError(f"label {label!r} not representable in RTTM")
            if round(seg.duration, RTTM_DECIMALS) <= 0:
                raise ValueError(
                    f"segment {seg} shorter than the millisecond rendering precision"
                )
            parts.append(
                f"SPEAKER {ann.uri} 1 {seg.start:.3f} {seg.duration:.3f} "
                f"<NA> <NA> {label} <NA> <NA>\n"
            )
    return "".join(parts)


def load_rttm(path: str | Path) -> dict[str, Annotation]:
    return parse_rttm(Path(path).read_text())


def save_rttm(path: str | Path, annotations: Annotation | Iterable[Annotation]) -> None:
    Path(path).write_text(serialize_rttm(annotations))
