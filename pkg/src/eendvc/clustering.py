"""Constrained agglomerative clustering over local speaker embeddings and
reconciliation of per-window segmentation into one global annotation.

Clustering runs in three stages: centroid-cosine merging down to a
similarity threshold, dissolution of undersized clusters into their nearest
surviving centroid, and enforcement of the speaker-count range by forced
merging (never splitting). All tie-breaking is deterministic: cluster ids
follow first-member insertion order and equal similarities merge the
lexicographically smallest id pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import SpeakerEmbedding
from .timeline import Annotation, Segment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AHCConfig:
    """Agglomerative clustering settings.

    Defaults: cosine threshold 0.70 as the merge stopping criterion,
    minimum cluster size of 30 embeddings, and a global speaker count
    constrained to [2, 8]. The size floor relaxes to the number of available
    embeddings on short recordings."""

    similarity_threshold: float = 0.70
    min_cluster_size: int = 30
    min_speakers: int = 2
    max_speakers: int = 8
    linkage: str = "centroid"

    def __post_init__(self):
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError(
                f"similarity threshold must lie in [-1, 1], got {self.similarity_threshold}"
            )
        if not 1 <= self.min_speakers <= self.max_speakers:
            raise ValueError(
                f"need 1 <= min_speakers <= max_speakers, got "
                f"[{self.min_speakers}, {self.max_speakers}]"
            )
        if self.linkage != "centroid":
            raise ValueError(f"only centroid linkage is supported, got {self.linkage!r}")


@dataclass(frozen=True)
class ClusterAssignment:
    """Global speaker identity for every embedded (window, slot) pair."""

    mapping: Mapping[tuple[int, int], int]
    cluster_count: int
    violations: tuple[str, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class WindowResult:
    """One inference window: decoded frame activity plus local embeddings."""

    index: int
    activity: np.ndarray  # (frames, max_speakers) binary
    frame_duration: float
    embeddings: tuple[SpeakerEmbedding, ...] = ()


class _Clusters:
    """Mutable cluster state: member indices, centroid sums, stable ids."""

    def __init__(self, vectors: np.ndarray):
        self.vectors = vectors
        self.members: list[list[int]] = [[i] for i in range(len(vectors))]
        self.ids: list[int] = list(range(len(vectors)))

    def __len__(self) -> int:
        return len(self.members)

    def centroids(self) -> np.ndarray:
        cents = np.stack([self.vectors[m].mean(axis=0) for m in self.members])
        norms = np.linalg.norm(cents, axis=1, keepdims=True)
        return cents / np.maximum(norms, 1e-12)

    def best_pair(self) -> tuple[float, int, int]:
        """(similarity, position_a, position_b) of the most similar pair;
        exact ties resolve to the smallest sorted id pair."""
        cents = self.centroids()
        sims = cents @ cents.T
        rows, cols = np.triu_indices(len(self.members), k=1)
        values = sims[rows, cols]
        best_sim = values.max()
        best_key = None
        best_pos = (-1, -1)
        for flat in np.flatnonzero(values == best_sim):
            a, b = int(rows[flat]), int(cols[flat])
            key = tuple(sorted((self.ids[a], self.ids[b])))
            if best_key is None or key < best_key:
                best_key, best_pos = key, (a, b)
        return float(best_sim), best_pos[0], best_pos[1]

    def merge(self, a: int, b: int) -> None:
        keep, drop = (a, b) if self.ids[a] <= self.ids[b] else (b, a)
        self.members[keep] = self.members[keep] + self.members[drop]
        del self.members[drop]
        del self.ids[drop]


def _threshold_merge(clusters: _Clusters, threshold: float) -> None:
    while len(clusters) > 1:
        sim, a, b = clusters.best_pair()
        if sim < threshold:
            break
        clusters.merge(a, b)


def _dissolve_small(
    clusters: _Clusters, min_cluster_size: int, violations: list[str]
) -> None:
    floor = min(min_cluster_size, len(clusters.vectors))
    surviving = [k for k, m in enumerate(clusters.members) if len(m) >= floor]
    if not surviving:
        violations.append(
            f"min-cluster-size {floor} unsatisfiable: largest cluster has "
            f"{max(len(m) for m in clusters.members)} members; dissolution skipped"
        )
        logger.warning(violations[-1])
        return
    if len(surviving) == len(clusters.members):
        return
    centroids = clusters.centroids()[surviving]
    new_members = [list(clusters.members[k]) for k in surviving]
    for k, member_list in enumerate(clusters.members):
        if k in surviving:
            continue
        for idx in member_list:
            nearest = int(np.argmax(centroids @ clusters.vectors[idx]))
            new_members[nearest].append(idx)
    clusters.ids = [clusters.ids[k] for k in surviving]
    clusters.members = new_members


def _enforce_count(
    clusters: _Clusters, min_speakers: int, max_speakers: int, violations: list[str]
) -> None:
    while len(clusters) > max_speakers:
        _, a, b = clusters.best_pair()
        clusters.merge(a, b)
    if len(clusters) < min_speakers:
        violations.append(
            f"cluster count {len(clusters)} below the minimum of {min_speakers}; "
            "splitting is out of scope"
        )
        logger.warning(violations[-1])


def cluster(
    embeddings: Iterable[SpeakerEmbedding], config: AHCConfig | None = None
) -> ClusterAssignment:
    """Group local speaker embeddings into global speaker identities."""
    config = config or AHCConfig()
    embeddings = tuple(embeddings)
    if not embeddings:
        raise ValueError("cannot cluster an empty embedding collection")
    keys = [(e.source_window, e.local_slot) for e in embeddings]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (window, slot) pairs in the embedding collection")

    vectors = np.stack([np.asarray(e.vector, dtype=np.float64) for e in embeddings])
    vectors /= np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)

    violations: list[str] = []
    clusters = _Clusters(vectors)
    _threshold_merge(clusters, config.similarity_threshold)
    _dissolve_small(clusters, config.min_cluster_size, violations)
    _enforce_count(clusters, config.min_speakers, config.max_speakers, violations)

    order = sorted(range(len(clusters)), key=lambda k: clusters.ids[k])
    mapping: dict[tuple[int, int], int] = {}
    for global_id, k in enumerate(order):
        for idx in clusters.members[k]:
            mapping[keys[idx]] = global_id
    return ClusterAssignment(mapping, len(clusters), tuple(violations))


def _runs(binary: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) index runs of ones in a binary vector."""
    padded = np.concatenate(([0], (np.asarray(binary) != 0).astype(np.int8), [0]))
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def reconcile(
    windows: Sequence[WindowResult],
    assignment: ClusterAssignment,
    window_duration: float,
    hop: float,
    uri: str = "recording",
) -> Annotation:
    """Relabel per-window activity with global speaker ids and place it on
    the recording's absolute time axis.

    Each window sits at ``index * hop``; frame runs become segments with no
    cross-window smoothing. Slots without an embedding (below the duration
    floor) are dropped. Global ids render as spk00, spk01, ... in order of
    first appearance."""
    if window_duration <= 0 or hop <= 0:
        raise ValueError("window duration and hop must be positive")
    collected: dict[int, list[Segment]] = {}
    for result in windows:
        offset = result.index * hop
        for slot in range(result.activity.shape[1]):
            global_id = assignment.mapping.get((result.index, slot))
            if global_id is None:
                continue
            for f0, f1 in _runs(result.activity[:, slot]):
                collected.setdefault(global_id, []).append(
                    Segment(
                        offset + f0 * result.frame_duration,
                        offset + f1 * result.frame_duration,
                    )
                )
    first_seen = {
        gid: min(seg.start for seg in segs) for gid, segs in collected.items()
    }
    ordered = sorted(collected, key=lambda gid: (first_seen[gid], gid))
    labels = {gid: f"spk{rank:02d}" for rank, gid in enumerate(ordered)}
    entries = tuple(
        (seg, labels[gid]) for gid, segs in collected.items() for seg in segs
    )
    return Annotation(uri, entries)
