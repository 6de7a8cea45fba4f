"""Per-local-speaker embedding extraction over window segmentation results.

Embeddings pool only frames where the slot is the sole active speaker, so
overlapped regions never contaminate speaker identity. Extractors sit behind
a name-based registry; the deterministic toy extractor ships for tests and
desk-scale runs, external speaker models plug in by the same interface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .features import N_MELS, mel_magnitudes
from .segmentation import SegmentationOutput

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingExtractorSpec:
    """Static description of an embedding extractor."""

    name: str
    dim: int
    min_active_duration: float = 0.5

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.dim}")
        if self.min_active_duration < 0:
            raise ValueError(
                f"min_active_duration must be >= 0, got {self.min_active_duration}"
            )


@dataclass(frozen=True)
class SpeakerEmbedding:
    """Unit-norm identity vector for one local speaker slot in one window."""

    vector: np.ndarray
    source_window: int
    local_slot: int
    active_duration: float


class EmbeddingExtractor:
    spec: EmbeddingExtractorSpec

    def extract(
        self,
        waveform: np.ndarray,
        segmentation: SegmentationOutput,
        window_index: int = 0,
    ) -> tuple[SpeakerEmbedding, ...]:
        raise NotImplementedError


class ToyEmbeddingExtractor(EmbeddingExtractor):
    """Liftered mean log-spectral statistics through a fixed seeded projection.

    Deterministic and separable by construction for harmonic voices:
    subtracting a smoothed copy of the mean log-mel vector removes the broad
    energy envelope every voice shares, leaving the per-voice harmonic
    footprint to set the embedding direction.
    """

    _LIFTER_WIDTH = 9  # mel bins; controls how much broad envelope survives

    def __init__(self, dim: int = 64, min_active_duration: float = 0.5, seed: int = 4483):
        if dim < N_MELS:
            raise ValueError(f"toy extractor dim must be >= {N_MELS}, got {dim}")
        self.spec = EmbeddingExtractorSpec("toy", dim, min_active_duration)
        rng = np.random.default_rng(seed)
        # Orthonormal rows (via QR) make the projection an exact isometry,
        # so embedding cosines equal the cosines of the liftered statistics.
        gaussian = rng.standard_normal((dim, N_MELS))
        q, _ = np.linalg.qr(gaussian)
        self._map = q[:, :N_MELS].T.astype(np.float64)

    @classmethod
    def _lifter(cls, stats: np.ndarray) -> np.ndarray:
        width = cls._LIFTER_WIDTH
        kernel = np.ones(width) / width
        smoothed = np.convolve(np.pad(stats, width // 2, mode="edge"), kernel, "valid")
        return stats - smoothed

    def extract(
        self,
        waveform: np.ndarray,
        segmentation: SegmentationOutput,
        window_index: int = 0,
    ) -> tuple[SpeakerEmbedding, ...]:
        activity = segmentation.decoded_activity
        feats = mel_magnitudes(waveform)
        num_frames = min(activity.shape[0], feats.shape[0])
        activity = activity[:num_frames]
        feats = feats[:num_frames]
        solo = activity.sum(axis=1) == 1

        out = []
        for slot in range(activity.shape[1]):
            mask = solo & (activity[:, slot] == 1)
            duration = float(mask.sum()) * segmentation.frame_duration
            if duration <= self.spec.min_active_duration:
                continue
            stats = self._lifter(np.log1p(feats[mask]).mean(axis=0))
            vector = stats @ self._map
            norm = np.linalg.norm(vector)
            if norm < 1e-12:
                logger.debug(
                    "window %d slot %d produced a degenerate embedding; skipped",
                    window_index,
                    slot,
                )
                continue
            out.append(
                SpeakerEmbedding(
                    (vector / norm).astype(np.float32), window_index, slot, duration
                )
            )
        return tuple(out)


def extract_local_embeddings(
    waveform: np.ndarray,
    segmentation: SegmentationOutput,
    extractor: EmbeddingExtractor,
    window_index: int = 0,
) -> tuple[SpeakerEmbedding, ...]:
    """One embedding per local slot with enough single-speaker activity.

    Slots whose solo activity does not exceed the extractor's duration floor
    contribute nothing; an all-silence window yields an empty collection."""
    return extractor.extract(waveform, segmentation, window_index)


def available_extractors() -> tuple[str, ...]:
    return ("toy",)


def get_extractor(name: str, **kwargs) -> EmbeddingExtractor:
    if name == "toy":
        return ToyEmbeddingExtractor(**kwargs)
    raise ValueError(
        f"unknown embedding extractor {name!r}; available: "
        f"{', '.join(available_extractors())}. External speaker models plug in "
        "by implementing EmbeddingExtractor and registering here."
    )
