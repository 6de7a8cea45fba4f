"""Diarization error rate with configurable collar, overlap included, and an
additive decomposition into missed detection, false alarm, and speaker
confusion under an optimal global speaker mapping.

Scoring partitions the time axis at every segment boundary of both
annotations. Within each homogeneous region with r active reference
speakers, h active hypothesis speakers, and m reference speakers whose
mapped hypothesis speaker is also active:

    missed detection  += max(r - h, 0) * duration
    false alarm       += max(h - r, 0) * duration
    speaker confusion += (min(r, h) - m) * duration

The one-to-one speaker mapping maximizes total matched speaker-time over the
whole recording (maximum-weight bipartite matching). Percentages normalize
by total reference speech time counted with overlap multiplicity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .timeline import Annotation


@dataclass(frozen=True)
class ErrorBreakdown:
    """Raw error times in seconds for one recording or an aggregate."""

    missed_seconds: float
    false_alarm_seconds: float
    confusion_seconds: float
    reference_seconds: float

    def __post_init__(self):
        if self.reference_seconds <= 0:
            raise ValueError("reference speech time must be positive")

    @property
    def error_seconds(self) -> float:
        return self.missed_seconds + self.false_alarm_seconds + self.confusion_seconds

    @property
    def missed_detection(self) -> float:
        return 100.0 * self.missed_seconds / self.reference_seconds

    @property
    def false_alarm(self) -> float:
        return 100.0 * self.false_alarm_seconds / self.reference_seconds

    @property
    def speaker_confusion(self) -> float:
        return 100.0 * self.confusion_seconds / self.reference_seconds

    @property
    def der(self) -> float:
        return 100.0 * self.error_seconds / self.reference_seconds

    def to_dict(self) -> dict:
        return {
            "missed_detection": self.missed_detection,
            "false_alarm": self.false_alarm,
            "speaker_confusion": self.speaker_confusion,
            "der": self.der,
            "missed_seconds": self.missed_seconds,
            "false_alarm_seconds": self.false_alarm_seconds,
            "confusion_seconds": self.confusion_seconds,
            "reference_seconds": self.reference_seconds,
        }


@dataclass(frozen=True)
class DERReport:
    """Per-recording error breakdowns plus their time-weighted aggregate."""

    overall: ErrorBreakdown
    per_recording: tuple[tuple[str, ErrorBreakdown], ...]

    def recording(self, uri: str) -> ErrorBreakdown:
        for name, breakdown in self.per_recording:
            if name == uri:
                return breakdown
        raise KeyError(uri)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_recording": {uri: b.to_dict() for uri, b in self.per_recording},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def render(self) -> str:
        """Human-readable table, one decimal place, components then DER."""
        rows = list(self.per_recording)
        if len(rows) > 1:
            rows.append(("TOTAL", self.overall))
        width = max(9, max(len(uri) for uri, _ in rows))
        lines = [f"{'recording':<{width}}  {'MD':>6}  {'FA':>6}  {'SC':>6}  {'DER':>6}"]
        for uri, b in rows:
            lines.append(
                f"{uri:<{width}}  {b.missed_detection:>6.1f}  {b.false_alarm:>6.1f}"
                f"  {b.speaker_confusion:>6.1f}  {b.der:>6.1f}"
            )
        return "\n".join(lines)


def _merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[tuple[float, float]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def _scored_regions(
    reference: Annotation, hypothesis: Annotation, collar: float
) -> list[tuple[float, frozenset[str], frozenset[str]]]:
    """(duration, active reference labels, active hypothesis labels) per
    elementary region, in time order, with collar regions excluded."""
    boundaries = set()
    for ann in (reference, hypothesis):
        for seg, _ in ann.entries:
            boundaries.update((seg.start, seg.end))
    excluded: list[tuple[float, float]] = []
    if collar > 0:
        for seg, _ in reference.entries:
            for b in (seg.start, seg.end):
                excluded.append((max(0.0, b - collar), b + collar))
        excluded = _merge_intervals(excluded)
        for start, end in excluded:
            boundaries.update((start, end))
    edges = sorted(boundaries)
    regions = []
    for t0, t1 in zip(edges[:-1], edges[1:]):
        if t1 <= t0:
            continue
        mid = 0.5 * (t0 + t1)
        if any(start <= mid < end for start, end in excluded):
            continue
        ref_active = frozenset(
            label for seg, label in reference.entries if seg.contains_time(mid)
        )
        hyp_active = frozenset(
            label for seg, label in hypothesis.entries if seg.contains_time(mid)
        )
        if ref_active or hyp_active:
            regions.append((t1 - t0, ref_active, hyp_active))
    return regions


def _optimal_mapping(
    reference: Annotation, hypothesis: Annotation
) -> dict[str, str]:
    """One-to-one speaker mapping maximizing co-active time over the whole
    recording (no collar exclusion)."""
    ref_labels = reference.labels()
    hyp_labels = hypothesis.labels()
    if not ref_labels or not hyp_labels:
        return {}
    overlap = np.zeros((len(ref_labels), len(hyp_labels)))
    for duration, ref_active, hyp_active in _scored_regions(reference, hypothesis, 0.0):
        for r in ref_active:
            for h in hyp_active:
                overlap[ref_labels.index(r), hyp_labels.index(h)] += duration
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {ref_labels[r]: hyp_labels[h] for r, h in zip(rows, cols)}


def score(reference: Annotation, hypothesis: Annotation, collar: float = 0.0) -> DERReport:
    """Score one hypothesis against its reference.

    Both annotations must carry the same uri. ``collar`` excludes a margin
    around every reference segment boundary from scoring (default 0)."""
    if collar < 0:
        raise ValueError(f"collar must be non-negative, got {collar}")
    if reference.uri != hypothesis.uri:
        raise ValueError(
            f"uri mismatch: reference {reference.uri!r} vs hypothesis {hypothesis.uri!r}"
        )
    mapping = _optimal_mapping(reference, hypothesis)
    missed = false_alarm = confusion = reference_time = 0.0
    for duration, ref_active, hyp_active in _scored_regions(reference, hypothesis, collar):
        r = len(ref_active)
        h = len(hyp_active)
        m = sum(1 for label in ref_active if mapping.get(label) in hyp_active)
        missed += max(r - h, 0) * duration
        false_alarm += max(h - r, 0) * duration
        confusion += (min(r, h) - m) * duration
        reference_time += r * duration
    if reference_time <= 0:
        raise ValueError(
            f"{reference.uri}: reference contains no scored speech; DER is undefined"
        )
    breakdown = ErrorBreakdown(missed, false_alarm, confusion, reference_time)
    return DERReport(breakdown, ((reference.uri, breakdown),))


def score_corpus(
    references: Mapping[str, Annotation],
    hypotheses: Mapping[str, Annotation],
    collar: float = 0.0,
) -> DERReport:
    """Score a set of recordings; a missing hypothesis counts as silence.

    The overall row aggregates raw times across recordings, so long files
    weigh more (this is the standard corpus DER, not the macro average)."""
    if not references:
        raise ValueError("no reference annotations to score")
    unmatched = set(hypotheses) - set(references)
    if unmatched:
        raise ValueError(f"hypotheses without references: {sorted(unmatched)}")
    per_recording = []
    for uri in sorted(references):
        hyp = hypotheses.get(uri, Annotation(uri))
        per_recording.append((uri, score(references[uri], hyp, collar).overall))
    overall = ErrorBreakdown(
        sum(b.missed_seconds for _, b in per_recording),
        sum(b.false_alarm_seconds for _, b in per_recording),
        sum(b.confusion_seconds for _, b in per_recording),
        sum(b.reference_seconds for _, b in per_recording),
    )
    return DERReport(overall, tuple(per_recording))


def macro_average(values: Iterable[float]) -> float:
    """Unweighted arithmetic mean of per-dataset percentages."""
    values = list(values)
    if not values:
        raise ValueError("macro average of an empty collection is undefined")
    return float(sum(values)) / len(values)


def relative_change(new: float, base: float) -> float:
    """Signed percent change of ``new`` relative to ``base``."""
    if base <= 0:
        raise ValueError(f"relative change needs a positive base, got {base}")
    return 100.0 * (new - base) / base


def format_percent(value: float) -> str:
    """Render a percentage at one decimal, matching report tables."""
    return f"{value:.1f}"


def format_relative(value: float) -> str:
    """Render a signed percent change at one decimal, e.g. ``-43.0%``."""
    return f"{value:+.1f}%"
