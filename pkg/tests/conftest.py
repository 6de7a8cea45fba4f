import numpy as np
import pytest

from eendvc.powerset import build_codec
from eendvc.timeline import Annotation, Segment


@pytest.fixture(scope="session")
def codec42():
    return build_codec(4, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_annotation(rng, uri="rec", max_speakers=4, max_segments=12, grid=0.25):
    """Random annotation on a dyadic time grid, at least one segment."""
    n = int(rng.integers(1, max_segments + 1))
    entries = []
    for _ in range(n):
        start = int(rng.integers(0, 120)) * grid
        duration = int(rng.integers(1, 24)) * grid
        label = f"s{int(rng.integers(0, max_speakers))}"
        entries.append((Segment(start, start + duration), label))
    return Annotation(uri, tuple(entries))


def random_ms_annotation(rng, uri="rec", max_segments=50):
    """Random annotation with millisecond-grid times, for RTTM round-trips."""
    n = int(rng.integers(1, max_segments + 1))
    entries = []
    for _ in range(n):
        start_ms = int(rng.integers(0, 600_000))
        duration_ms = int(rng.integers(1, 30_000))
        label = f"spk{int(rng.integers(0, 6)):02d}"
        entries.append(
            (Segment(start_ms / 1000.0, (start_ms + duration_ms) / 1000.0), label)
        )
    return Annotation(uri, tuple(entries))
