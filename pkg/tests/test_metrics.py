import pytest

from conftest import random_annotation
from oracles import brute_force_der
from eendvc.metrics import (
    DERReport,
    ErrorBreakdown,
    format_percent,
    format_relative,
    macro_average,
    relative_change,
    score,
    score_corpus,
)
from eendvc.timeline import Annotation, Segment


class TestScoreBasics:
    def test_identity_hypothesis_zero_error(self, rng):
        ref = random_annotation(rng)
        report = score(ref, ref).overall
        assert report.missed_detection == 0.0
        assert report.false_alarm == 0.0
        assert report.speaker_confusion == 0.0
        assert report.der == 0.0

    def test_empty_hypothesis_all_missed(self):
        ref = Annotation("u", ((Segment(0, 10), "A"),))
        report = score(ref, Annotation("u")).overall
        assert report.missed_detection == 100.0
        assert report.der == 100.0

    def test_empty_reference_rejected(self):
        hyp = Annotation("u", ((Segment(0, 10), "A"),))
        with pytest.raises(ValueError, match="no scored speech"):
            score(Annotation("u"), hyp)

    def test_uri_mismatch_rejected(self):
        a = Annotation("a", ((Segment(0, 1), "A"),))
        b = Annotation("b", ((Segment(0, 1), "A"),))
        with pytest.raises(ValueError, match="uri"):
            score(a, b)

    def test_hypothesis_relabeling_invariant(self, rng):
        for _ in range(30):
            ref = random_annotation(rng)
            hyp = random_annotation(rng)
            renamed = Annotation(
                "rec", tuple((seg, f"x_{label}") for seg, label in hyp.entries)
            )
            a = score(ref, hyp).overall
            b = score(ref, renamed).overall
            assert (a.missed_seconds, a.false_alarm_seconds, a.confusion_seconds) == (
                b.missed_seconds,
                b.false_alarm_seconds,
                b.confusion_seconds,
            )

    def test_decomposition_identity_in_time_units(self, rng):
        for _ in range(50):
            ref = random_annotation(rng)
            hyp = random_annotation(rng)
            b = score(ref, hyp).overall
            assert b.error_seconds == (
                b.missed_seconds + b.false_alarm_seconds + b.confusion_seconds
            )

    def test_removing_reference_copy_never_decreases_md_or_der(self, rng):
        """Dropping one exactly-correct hypothesis segment from an otherwise
        perfect hypothesis can only hurt."""
        for _ in range(20):
            ref = random_annotation(rng)
            base = score(ref, ref).overall
            victim = ref.entries[int(rng.integers(0, len(ref.entries)))]
            reduced = Annotation(
                "rec", tuple(e for e in ref.entries if e != victim)
            )
            degraded = score(ref, reduced).overall
            assert degraded.missed_seconds >= base.missed_seconds
            assert degraded.der >= base.der

    def test_removing_any_hypothesis_segment_never_decreases_md(self, rng):
        for _ in range(30):
            ref = random_annotation(rng)
            hyp = random_annotation(rng)
            base = score(ref, hyp).overall
            victim = hyp.entries[int(rng.integers(0, len(hyp.entries)))]
            reduced = Annotation("rec", tuple(e for e in hyp.entries if e != victim))
            assert score(ref, reduced).overall.missed_seconds >= base.missed_seconds


class TestOverlapRegions:
    def test_correctly_mapped_overlap_contributes_zero(self):
        ref = Annotation("u", ((Segment(0, 4), "A"), (Segment(2, 6), "B")))
        hyp = Annotation("u", ((Segment(0, 4), "x"), (Segment(2, 6), "y")))
        assert score(ref, hyp).overall.der == 0.0

    def test_overlap_with_single_hypothesis_speaker_is_missed(self):
        ref = Annotation("u", ((Segment(0, 4), "A"), (Segment(0, 4), "B")))
        hyp = Annotation("u", ((Segment(0, 4), "x"),))
        b = score(ref, hyp).overall
        assert b.missed_seconds == pytest.approx(4.0)
        assert b.confusion_seconds == 0.0
        assert b.reference_seconds == pytest.approx(8.0)

    def test_reference_time_counts_overlap_multiplicity(self):
        ref = Annotation("u", ((Segment(0, 4), "A"), (Segment(0, 4), "B")))
        assert score(ref, Annotation("u")).overall.reference_seconds == pytest.approx(8.0)


class TestCollar:
    def test_collar_zero_is_default(self):
        ref = Annotation("u", ((Segment(0, 10), "A"),))
        hyp = Annotation("u", ((Segment(0.2, 10), "A"),))
        assert score(ref, hyp).overall.missed_seconds == pytest.approx(0.2)

    def test_collar_excludes_boundary_errors(self):
        ref = Annotation("u", ((Segment(0, 10), "A"),))
        hyp = Annotation("u", ((Segment(0.2, 10), "A"),))
        report = score(ref, hyp, collar=0.25).overall
        assert report.missed_seconds == 0.0
        # [0, 0.25] and [9.75, 10] are excluded around the boundaries
        assert report.reference_seconds == pytest.approx(9.5)

    def test_negative_collar_rejected(self):
        ref = Annotation("u", ((Segment(0, 1), "A"),))
        with pytest.raises(ValueError, match="collar"):
            score(ref, ref, collar=-1.0)


class TestOracleEquivalence:
    def test_matches_brute_force_exactly(self, rng):
        for _ in range(400):
            ref = random_annotation(rng)
            hyp = (
                random_annotation(rng)
                if rng.random() > 0.05
                else Annotation("rec")
            )
            expected = brute_force_der(ref, hyp)
            got = score(ref, hyp).overall
            assert expected == (
                got.missed_seconds,
                got.false_alarm_seconds,
                got.confusion_seconds,
                got.reference_seconds,
            )


class TestCorpus:
    def test_aggregates_by_time(self):
        ref1 = Annotation("a", ((Segment(0, 10), "A"),))
        ref2 = Annotation("b", ((Segment(0, 30), "A"),))
        hyps = {"a": Annotation("a"), "b": ref2}
        report = score_corpus({"a": ref1, "b": ref2}, hyps)
        assert report.overall.missed_seconds == pytest.approx(10.0)
        assert report.overall.reference_seconds == pytest.approx(40.0)
        assert report.overall.der == pytest.approx(25.0)
        assert report.recording("a").der == 100.0
        assert report.recording("b").der == 0.0

    def test_missing_hypothesis_counts_as_silence(self):
        ref = Annotation("a", ((Segment(0, 10), "A"),))
        report = score_corpus({"a": ref}, {})
        assert report.overall.missed_detection == 100.0

    def test_unmatched_hypothesis_rejected(self):
        ref = Annotation("a", ((Segment(0, 1), "A"),))
        with pytest.raises(ValueError, match="without references"):
            score_corpus({"a": ref}, {"b": ref})

    def test_json_roundtrip(self):
        ref = Annotation("a", ((Segment(0, 10), "A"),))
        report = score_corpus({"a": ref}, {"a": ref})
        payload = report.to_dict()
        assert payload["overall"]["der"] == 0.0
        assert "a" in payload["per_recording"]


class TestReportArithmetic:
    def test_error_decomposition_formats_consistently(self):
        # a recording with 5.8 / 11.6 / 4.7 percent components sums to 22.1
        b = ErrorBreakdown(58.0, 116.0, 47.0, 1000.0)
        parts = (
            format_percent(b.missed_detection),
            format_percent(b.false_alarm),
            format_percent(b.speaker_confusion),
            format_percent(b.der),
        )
        assert parts == ("5.8", "11.6", "4.7", "22.1")
        displayed_sum = sum(float(p) for p in parts[:3])
        assert abs(displayed_sum - float(parts[3])) <= 0.05

    @pytest.mark.parametrize(
        "values,expected",
        [
            ([18.6, 20.2, 12.2], "17.0"),
            ([16.2, 18.0, 9.8], "14.7"),
            ([42.0], "42.0"),
        ],
    )
    def test_macro_average(self, values, expected):
        assert format_percent(macro_average(values)) == expected

    def test_macro_average_empty_rejected(self):
        with pytest.raises(ValueError):
            macro_average([])

    @pytest.mark.parametrize(
        "new,base,expected",
        [
            (13.9, 24.4, "-43.0%"),
            (40.9, 59.7, "-31.5%"),
            (7.5, 7.5, "+0.0%"),
        ],
    )
    def test_relative_change(self, new, base, expected):
        assert format_relative(relative_change(new, base)) == expected

    def test_relative_change_needs_positive_base(self):
        with pytest.raises(ValueError):
            relative_change(1.0, 0.0)

    def test_render_table_one_decimal(self):
        b = ErrorBreakdown(58.0, 116.0, 47.0, 1000.0)
        report = DERReport(b, (("rec1", b),))
        table = report.render()
        assert "5.8" in table and "11.6" in table and "22.1" in table
