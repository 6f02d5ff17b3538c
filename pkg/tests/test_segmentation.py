import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from acoustemo.segmentation import (
    EmptySegment,
    FrameFeatureSequence,
    InvalidSpan,
    UtteranceSpan,
    extract_segments,
    fixed_windows,
    map_span,
)


def scan_oracle(t_start, t_end, f_s, length):
    """Brute-force reference: walk every frame index and keep those the floor/ceil rule admits.

    Frame j covers [j/f_s, (j+1)/f_s).  It belongs to the span when it starts
    before t_end and ends after t_start, i.e. the frame overlaps [t_start,
    t_end).  Exact rationals avoid any float rounding in the comparison.
    """
    t0, t1, fs = Fraction(repr(t_start)), Fraction(repr(t_end)), Fraction(repr(f_s))
    hits = [j for j in range(length) if Fraction(j) / fs < t1 and Fraction(j + 1) / fs > t0]
    if not hits:
        return None
    raw = (math.floor(t0 * fs), math.ceil(t1 * fs))
    return hits[0], hits[-1] + 1, (hits[0], hits[-1] + 1) != raw


def random_case(rng):
    f_s = float(rng.choice([16.0, 25.0, 50.0, 100.0, 12.5, 33.3]))
    length = int(rng.integers(1, 400))
    duration = length / f_s
    t0 = float(np.round(rng.uniform(0, duration * 1.2), int(rng.integers(1, 4))))
    t1 = float(np.round(t0 + rng.uniform(0.001, duration * 0.6 + 0.05), int(rng.integers(1, 4))))
    if t1 <= t0:
        t1 = t0 + 0.5
    return t0, t1, f_s, length


class TestMapSpan:
    def test_basic(self):
        fr = map_span(UtteranceSpan(1, 1.0, 2.5), 50, 1000)
        assert (fr.i_start, fr.i_end, fr.clamped) == (50, 125, False)

    def test_integer_end_not_extended(self):
        fr = map_span(UtteranceSpan(1, 0.0, 0.02), 50, 1000)
        assert (fr.i_start, fr.i_end) == (0, 1)

    def test_clamp(self):
        fr = map_span(UtteranceSpan(1, 19.9, 25.0), 50, 1000)
        assert (fr.i_start, fr.i_end, fr.clamped) == (995, 1000, True)

    def test_past_end_is_empty(self):
        with pytest.raises(EmptySegment) as info:
            map_span(UtteranceSpan(7, 30.0, 31.0), 50, 1000)
        assert info.value.utterance_index == 7

    @pytest.mark.parametrize("t0,t1", [(2.0, 2.0), (3.0, 1.0)])
    def test_invalid_span(self, t0, t1):
        with pytest.raises(InvalidSpan):
            UtteranceSpan(1, t0, t1)

    def test_float_rate_handled_exactly(self):
        # 0.1 * 30 is 3.0000000000000004 in floats; the decimal reading gives exactly 3
        fr = map_span(UtteranceSpan(1, 0.1, 0.2), 30.0, 100)
        assert (fr.i_start, fr.i_end) == (3, 6)

    def test_against_scan_oracle(self):
        rng = np.random.default_rng(2024)
        n_empty = n_clamped = 0
        for _ in range(1000):
            t0, t1, f_s, length = random_case(rng)
            expected = scan_oracle(t0, t1, f_s, length)
            if expected is None:
                n_empty += 1
                with pytest.raises(EmptySegment):
                    map_span(UtteranceSpan(1, t0, t1), f_s, length)
                continue
            fr = map_span(UtteranceSpan(1, t0, t1), f_s, length)
            assert (fr.i_start, fr.i_end, fr.clamped) == expected, (t0, t1, f_s, length)
            n_clamped += fr.clamped
        assert n_empty > 0 and n_clamped > 0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 20), st.floats(0.01, 10), st.floats(0, 5), st.floats(0, 5))
    def test_monotone_and_nested(self, t0, width, grow_left, grow_right):
        f_s, length = 50, 2000
        inner = UtteranceSpan(1, t0, t0 + width)
        outer = UtteranceSpan(1, max(0.0, t0 - grow_left), t0 + width + grow_right)
        assume(outer.t_start < outer.t_end)
        a, b = map_span(inner, f_s, length), map_span(outer, f_s, length)
        assert b.i_start <= a.i_start and a.i_end <= b.i_end


class TestExtractSegments:
    def _seq(self, n=1000, d=4):
        return FrameFeatureSequence(np.arange(n * d, dtype=float).reshape(n, d), 50)

    def test_disjoint(self):
        seq = self._seq()
        segs = extract_segments(seq, [UtteranceSpan(1, 0.5, 1.0), UtteranceSpan(2, 2.0, 4.01)])
        assert [s.features.shape[0] for s in segs] == [25, 101]
        np.testing.assert_array_equal(segs[0].features, seq.features[25:50])

    def test_overlap_copies(self):
        seq = self._seq()
        a, b = extract_segments(seq, [UtteranceSpan(1, 1.0, 3.0), UtteranceSpan(2, 2.0, 4.0)])
        np.testing.assert_array_equal(a.features[50:], b.features[:50])
        a.features[50:] = -1
        assert np.all(b.features[:50] >= 0)
        assert not np.shares_memory(a.features, seq.features)

    def test_all_or_nothing(self):
        seq = self._seq()
        spans = [UtteranceSpan(1, 0.0, 1.0), UtteranceSpan(2, 50.0, 51.0), UtteranceSpan(3, 1.0, 2.0)]
        with pytest.raises(EmptySegment) as info:
            extract_segments(seq, spans)
        assert info.value.utterance_index == 2


class TestFixedWindows:
    def test_exact_division(self):
        seq = FrameFeatureSequence(np.zeros((500, 2)), 50)
        spans = fixed_windows(seq, 2.0)
        assert [(s.i_start, s.i_end) for s in spans] == [(k * 100, k * 100 + 100) for k in range(5)]

    def test_partial_tail(self):
        spans = fixed_windows(FrameFeatureSequence(np.zeros((525, 2)), 50), 2.0)
        assert len(spans) == 6 and spans[-1].length == 25

    def test_boundary_mismatch(self):
        seq = FrameFeatureSequence(np.zeros((500, 2)), 50)
        boundary = map_span(UtteranceSpan(1, 0.2, 1.3), 50, 500).i_end
        edges = {e for s in fixed_windows(seq, 2.0) for e in (s.i_start, s.i_end)}
        assert boundary == 65 and boundary not in edges

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 3000), st.sampled_from([16.0, 50.0, 12.5, 100.0]), st.floats(0.05, 7.0))
    def test_partition(self, length, f_s, window):
        seq = FrameFeatureSequence(np.zeros((length, 1)), f_s)
        spans = fixed_windows(seq, window)
        assert spans[0].i_start == 0 and spans[-1].i_end == length
        for a, b in zip(spans, spans[1:]):
            assert a.i_end == b.i_start
        assert all(s.length > 0 for s in spans)


def test_sequence_invariants():
    seq = FrameFeatureSequence(np.zeros((75, 3)), 50)
    assert seq.duration_seconds == Fraction(3, 2)
    with pytest.raises(ValueError):
        FrameFeatureSequence(np.zeros((0, 3)), 50)
    with pytest.raises(ValueError):
        FrameFeatureSequence(np.zeros((3, 3)), 0)
