"""Independent brute-force oracles used by the unit and acceptance tests.

These deliberately avoid the production code paths: the slot-assignment
oracle loops over frames with plain dict lookups, and the scoring oracle
enumerates every injective speaker mapping explicitly.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from eendvc.timeline import Annotation


def brute_force_assign(reference_activity, predicted_distribution, codec):
    """Minimal-NLL injection by exhaustive enumeration, per-frame loops."""
    ref = np.asarray(reference_activity)
    probs = np.asarray(predicted_distribution, dtype=np.float64)
    num_frames, num_speakers = ref.shape
    class_of = {subset: idx for idx, subset in enumerate(codec.classes)}

    best_nll = math.inf
    best = None
    for injection in itertools.permutations(range(codec.max_speakers), num_speakers):
        targets = []
        nll = 0.0
        for t in range(num_frames):
            subset = tuple(
                sorted(injection[s] for s in range(num_speakers) if ref[t, s])
            )
            cls = class_of[subset]
            targets.append(cls)
            nll -= math.log(max(probs[t, cls], 1e-300))
        if nll < best_nll:
            best_nll = nll
            best = (injection, np.asarray(targets, dtype=np.int64))
    return best


def _regions(reference: Annotation, hypothesis: Annotation):
    bounds = sorted(
        {
            t
            for ann in (reference, hypothesis)
            for seg, _ in ann.entries
            for t in (seg.start, seg.end)
        }
    )
    regions = []
    for t0, t1 in zip(bounds[:-1], bounds[1:]):
        if t1 <= t0:
            continue
        mid = 0.5 * (t0 + t1)
        ref_active = frozenset(
            label for seg, label in reference.entries if seg.start <= mid < seg.end
        )
        hyp_active = frozenset(
            label for seg, label in hypothesis.entries if seg.start <= mid < seg.end
        )
        if ref_active or hyp_active:
            regions.append((t1 - t0, ref_active, hyp_active))
    return regions


def brute_force_der(reference: Annotation, hypothesis: Annotation):
    """(missed, false alarm, confusion, reference) times in seconds, with the
    speaker mapping chosen by enumerating all injective mappings."""
    regions = _regions(reference, hypothesis)
    ref_labels = reference.labels()
    hyp_labels = hypothesis.labels()

    best_matched = -1.0
    best_map: dict[str, str] = {}
    if ref_labels and hyp_labels:
        if len(ref_labels) <= len(hyp_labels):
            candidates = (
                dict(zip(ref_labels, perm))
                for perm in itertools.permutations(hyp_labels, len(ref_labels))
            )
        else:
            candidates = (
                {r: h for h, r in zip(hyp_labels, perm)}
                for perm in itertools.permutations(ref_labels, len(hyp_labels))
            )
        for mapping in candidates:
            matched = 0.0
            for duration, ref_active, hyp_active in regions:
                matched += sum(
                    duration for r in ref_active if mapping.get(r) in hyp_active
                )
            if matched > best_matched:
                best_matched = matched
                best_map = mapping

    missed = false_alarm = confusion = reference_time = 0.0
    for duration, ref_active, hyp_active in regions:
        r = len(ref_active)
        h = len(hyp_active)
        m = sum(1 for label in ref_active if best_map.get(label) in hyp_active)
        missed += max(r - h, 0) * duration
        false_alarm += max(h - r, 0) * duration
        confusion += (min(r, h) - m) * duration
        reference_time += r * duration
    return missed, false_alarm, confusion, reference_time
