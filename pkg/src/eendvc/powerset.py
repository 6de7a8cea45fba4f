"""Powerset encoding of concurrent speaker activity.

Frame-level activity over K speaker slots, with at most C speakers active
at once, maps bijectively onto sum_{j=0..C} binomial(K, j) classes: the
empty set (silence) first, then subsets ordered by size and lexicographic
slot order. Training targets are built by searching all injections of the
reference speakers into the K slots for the one that minimizes the negative
log-likelihood under the model's current predictions.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

_LOG_FLOOR = 1e-300  # keeps log() finite on degenerate zero probabilities


class CodecConfigError(ValueError):
    """Invalid (max_speakers, max_concurrent) combination."""


class EncodingError(ValueError):
    """Activity row not representable by the codec."""


class TooManySpeakersError(ValueError):
    """Reference window holds more speakers than the codec has slots.

    Callers are expected to drop or re-chunk the offending window."""


@dataclass(frozen=True)
class PowersetCodec:
    """Bijection between speaker subsets and class indices."""

    max_speakers: int
    max_concurrent: int
    classes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        # Bitmask lookup table: subset bitmask -> class index, -1 if not a class.
        lut = np.full(1 << self.max_speakers, -1, dtype=np.int64)
        for idx, subset in enumerate(self.classes):
            lut[sum(1 << s for s in subset)] = idx
        object.__setattr__(self, "_mask_to_class", lut)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def build_codec(max_speakers: int, max_concurrent: int) -> PowersetCodec:
    """Codec over ``max_speakers`` slots with at most ``max_concurrent``
    simultaneously active; class count is sum_j binomial(K, j) for j <= C."""
    if max_speakers < 1:
        raise CodecConfigError(f"max_speakers must be >= 1, got {max_speakers}")
    if not 1 <= max_concurrent <= max_speakers:
        raise CodecConfigError(
            f"max_concurrent must lie in [1, {max_speakers}], got {max_concurrent}"
        )
    classes: list[tuple[int, ...]] = []
    for size in range(max_concurrent + 1):
        classes.extend(itertools.combinations(range(max_speakers), size))
    return PowersetCodec(max_speakers, max_concurrent, tuple(classes))


def encode(activity_row: np.ndarray, codec: PowersetCodec) -> int:
    """Class index of one binary activity row of length max_speakers."""
    row = np.asarray(activity_row)
    if row.shape != (codec.max_speakers,):
        raise EncodingError(
            f"expected row of length {codec.max_speakers}, got shape {row.shape}"
        )
    active = np.flatnonzero(row)
    if len(active) > codec.max_concurrent:
        raise EncodingError(
            f"{len(active)} concurrent speakers exceed the cap of {codec.max_concurrent}"
        )
    return int(codec._mask_to_class[int(sum(1 << int(s) for s in active))])


def decode(class_index: int, codec: PowersetCodec) -> np.ndarray:
    """Binary activity row of length max_speakers for one class index."""
    if not 0 <= class_index < codec.num_classes:
        raise EncodingError(
            f"class index {class_index} outside [0, {codec.num_classes})"
        )
    row = np.zeros(codec.max_speakers, dtype=np.int8)
    row[list(codec.classes[class_index])] = 1
    return row


def encode_frames(activity: np.ndarray, codec: PowersetCodec) -> np.ndarray:
    """Vectorized per-frame encoding of a (frames, max_speakers) matrix."""
    activity = np.asarray(activity)
    if activity.ndim != 2 or activity.shape[1] != codec.max_speakers:
        raise EncodingError(
            f"expected (frames, {codec.max_speakers}) activity, got shape {activity.shape}"
        )
    masks = (activity != 0).astype(np.int64) @ (1 << np.arange(codec.max_speakers))
    targets = codec._mask_to_class[masks]
    if (targets < 0).any():
        bad = int(np.flatnonzero(targets < 0)[0])
        raise EncodingError(
            f"frame {bad} has more than {codec.max_concurrent} concurrent speakers"
        )
    return targets


def decode_frames(targets: np.ndarray, codec: PowersetCodec) -> np.ndarray:
    """Inverse of encode_frames: (frames,) class indices -> (frames, K) binary."""
    targets = np.asarray(targets)
    table = np.stack([decode(i, codec) for i in range(codec.num_classes)])
    if targets.size and (targets.min() < 0 or targets.max() >= codec.num_classes):
        raise EncodingError("class index outside codec range")
    return table[targets]


def clip_concurrency(activity: np.ndarray, max_concurrent: int) -> np.ndarray:
    """Limit every frame to ``max_concurrent`` active speakers.

    Frames over the cap keep the speakers with the most active frames in the
    whole window; ties go to the lexicographically larger activity pattern,
    then to the lower speaker index.
    """
    activity = (np.asarray(activity) != 0).astype(np.int8)
    over = activity.sum(axis=1) > max_concurrent
    if not over.any():
        return activity
    totals = activity.sum(axis=0)
    patterns = ["".join(map(str, activity[:, s])) for s in range(activity.shape[1])]
    rank = sorted(
        range(activity.shape[1]), key=lambda s: (-totals[s], patterns[s], s)
    )
    priority = {s: r for r, s in enumerate(rank)}
    clipped = activity.copy()
    for t in np.flatnonzero(over):
        active = sorted(np.flatnonzero(clipped[t]), key=priority.__getitem__)
        clipped[t, active[max_concurrent:]] = 0
    return clipped


def assign_slots(
    reference_activity: np.ndarray,
    predicted_distribution: np.ndarray,
    codec: PowersetCodec,
) -> tuple[tuple[int, ...], np.ndarray]:
    """Best injection of reference speakers into codec slots.

    Searches every injection of the S reference speakers into the K slots
    (K! / (K-S)! candidates) for the one whose induced frame targets have
    minimal negative log-likelihood under ``predicted_distribution``
    (frames x classes probability rows). Ties resolve to the
    lexicographically smallest injection, i.e. the lowest slot indices.

    Returns (injection, targets) where injection[i] is the slot of reference
    speaker i and targets is the per-frame class index array.
    """
    ref = np.asarray(reference_activity)
    probs = np.asarray(predicted_distribution, dtype=np.float64)
    if ref.ndim != 2:
        raise ValueError(f"expected (frames, speakers) activity, got shape {ref.shape}")
    num_frames, num_speakers = ref.shape
    if probs.shape != (num_frames, codec.num_classes):
        raise ValueError(
            f"expected ({num_frames}, {codec.num_classes}) distribution, "
            f"got shape {probs.shape}"
        )
    if num_speakers > codec.max_speakers:
        raise TooManySpeakersError(
            f"{num_speakers} reference speakers exceed {codec.max_speakers} slots"
        )
    ref = clip_concurrency(ref, codec.max_concurrent)
    log_probs = np.log(np.maximum(probs, _LOG_FLOOR))
    frame_index = np.arange(num_frames)

    best_nll = np.inf
    best: tuple[tuple[int, ...], np.ndarray] | None = None
    for injection in itertools.permutations(range(codec.max_speakers), num_speakers):
        induced = np.zeros((num_frames, codec.max_speakers), dtype=np.int8)
        if num_speakers:
            induced[:, list(injection)] = ref
        targets = encode_frames(induced, codec)
        nll = -log_probs[frame_index, targets].sum()
        if nll < best_nll:
            best_nll = nll
            best = (injection, targets)
    assert best is not None
    return best
