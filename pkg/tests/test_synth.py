import numpy as np
import pytest

from eendvc.synth import (
    AGE_BANDS,
    SyntheticSceneSpec,
    VoiceSpec,
    default_voices,
    generate_scene,
    scene_variant,
)


class TestSpecValidation:
    def test_defaults_valid(self):
        spec = SyntheticSceneSpec()
        assert spec.num_speakers == 2
        assert spec.duration == 120.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_speakers": 0},
            {"overlap_fraction": 1.0},
            {"overlap_fraction": -0.1},
            {"turn_min": 0.0},
            {"turn_min": 6.0, "turn_max": 5.0},
            {"age_group": "teen"},
            {"duration": 5.0},
        ],
    )
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticSceneSpec(**kwargs)

    def test_voice_validation(self):
        with pytest.raises(ValueError):
            VoiceSpec(f0=-10.0)
        with pytest.raises(ValueError):
            VoiceSpec(f0=100.0, pause_probability=1.5)


class TestVoices:
    def test_age_bands_cover_groups(self):
        assert set(AGE_BANDS) == {"adult", "older-adult", "child-adult"}

    @pytest.mark.parametrize("age_group", sorted(AGE_BANDS))
    def test_default_voices_inside_band(self, age_group):
        lo, hi = AGE_BANDS[age_group]
        voices = default_voices(3, age_group)
        assert len(voices) == 3
        for voice in voices:
            assert lo * 0.9 <= voice.f0 <= hi * 1.1
        f0s = [v.f0 for v in voices]
        assert len(set(f0s)) == 3

    def test_default_voices_are_canonical(self):
        # same roster every call: held-out scenes reuse the training voices
        assert default_voices(2, "adult") == default_voices(2, "adult")
        assert default_voices(2, "adult") != default_voices(2, "child-adult")


class TestGenerateScene:
    def test_single_speaker_speech_bounded(self):
        spec = SyntheticSceneSpec(
            uri="solo", num_speakers=1, duration=12.0, overlap_fraction=0.0, seed=3
        )
        waveform, annotation = generate_scene(spec)
        stats = annotation.stats()
        assert stats.speaker_count == 1
        assert stats.total_speech <= 12.0
        assert stats.overlap_duration == 0.0
        assert waveform.shape == (12 * 16000,)

    def test_byte_identical_given_seed(self):
        spec = SyntheticSceneSpec(uri="x", seed=9, duration=30.0)
        w1, a1 = generate_scene(spec)
        w2, a2 = generate_scene(spec)
        assert np.array_equal(w1, w2)
        assert a1 == a2

    def test_different_seeds_differ(self):
        w1, _ = generate_scene(SyntheticSceneSpec(uri="x", seed=1, duration=30.0))
        w2, _ = generate_scene(SyntheticSceneSpec(uri="x", seed=2, duration=30.0))
        assert not np.array_equal(w1, w2)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_overlap_fraction_delivered(self, seed):
        spec = SyntheticSceneSpec(
            uri="ov", num_speakers=2, duration=120.0, overlap_fraction=0.2, seed=seed
        )
        _, annotation = generate_scene(spec)
        stats = annotation.stats()
        ratio = stats.overlap_duration / stats.total_speech
        assert 0.15 <= ratio <= 0.25

    def test_silence_between_turns_is_exactly_zero(self):
        spec = SyntheticSceneSpec(uri="x", seed=5, duration=30.0)
        waveform, annotation = generate_scene(spec)
        sr = 16000
        boundaries = sorted(
            {t for seg, _ in annotation.entries for t in (seg.start, seg.end)}
        )
        # probe a gap: find a region not covered by any segment
        for t0, t1 in zip(boundaries[:-1], boundaries[1:]):
            mid = 0.5 * (t0 + t1)
            if not any(seg.contains_time(mid) for seg, _ in annotation.entries):
                i0, i1 = int(t0 * sr) + 1, int(t1 * sr) - 1
                assert np.all(waveform[i0:i1] == 0.0)
                break
        else:
            pytest.fail("scene contains no silence gap to probe")

    def test_annotation_matches_rendered_activity(self):
        spec = SyntheticSceneSpec(uri="x", seed=6, duration=30.0)
        waveform, annotation = generate_scene(spec)
        sr = 16000
        for seg, _ in annotation.entries[:5]:
            chunk = waveform[int(seg.start * sr) : int(seg.end * sr)]
            assert np.abs(chunk).max() > 0.01

    def test_concurrency_never_exceeds_two(self):
        for seed in range(4):
            spec = SyntheticSceneSpec(
                uri="x", num_speakers=4, duration=60.0, overlap_fraction=0.3, seed=seed
            )
            _, annotation = generate_scene(spec)
            boundaries = sorted(
                {t for seg, _ in annotation.entries for t in (seg.start, seg.end)}
            )
            for t0, t1 in zip(boundaries[:-1], boundaries[1:]):
                mid = 0.5 * (t0 + t1)
                active = sum(
                    1 for seg, _ in annotation.entries if seg.contains_time(mid)
                )
                assert active <= 2

    def test_scene_variant_derives_uri_and_seed(self):
        base = SyntheticSceneSpec(seed=100)
        v = scene_variant(base, 3)
        assert v.uri == "scene003"
        assert v.seed == 103
