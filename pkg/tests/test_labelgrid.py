from decimal import ROUND_FLOOR, ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, strategies as st

from birdsed import labelgrid
from birdsed.errors import FrameCountOverflow, InvalidInterval, SpeciesIdOutOfRange
from birdsed.synth import LabelTrack


def oracle_round(x: float) -> int:
    return int(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def oracle_matrix(track, C):
    """Scan every (segment, species) cell against every event."""
    T = int(Decimal(track.recording_duration_s).to_integral_value(rounding="ROUND_CEILING"))
    out = np.zeros((T, C), dtype=np.uint8)
    for i in range(T):
        for c in range(C):
            for s, a, b in track.events:
                if s != c:
                    continue
                lo, hi = oracle_round(a), oracle_round(b)
                if lo == hi:
                    mid = int(((Decimal(a) + Decimal(b)) / 2).to_integral_value(rounding=ROUND_FLOOR))
                    lo, hi = mid, mid + 1
                if lo <= i < hi:
                    out[i, c] = 1
    return out


def random_track(rng, C):
    duration = float(rng.choice([rng.uniform(0.5, 30), rng.integers(1, 30)]))
    events = []
    for _ in range(rng.integers(0, 12)):
        if rng.random() < 0.4:  # grid-aligned times to exercise ties
            a = float(rng.integers(0, int(duration * 20))) / 20
            b = a + float(rng.integers(1, 60)) / 20
        else:
            a = float(rng.uniform(0, duration))
            b = a + float(rng.uniform(1e-3, 4))
        b = min(b, duration)
        if a < b:
            events.append((int(rng.integers(C)), a, b))
    return LabelTrack(events, duration)


def test_matches_brute_force_on_random_tracks():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        C = int(rng.integers(1, 7))
        track = random_track(rng, C)
        np.testing.assert_array_equal(labelgrid.to_segment_matrix(track, C), oracle_matrix(track, C))


@pytest.mark.parametrize("interval,expected", [((1.3, 3.6), (1, 4)), ((0.0, 1.0), (0, 1)), ((2.1, 2.3), (2, 3)),
                                               ((2.5, 3.49), (2, 3)), ((0.2, 0.45), (0, 1)), ((2.5, 3.5), (3, 4))])
def test_round_interval_examples(interval, expected):
    assert labelgrid.round_interval(*interval) == expected


def test_round_half_up_exact_below_half():
    assert labelgrid.round_half_up(0.49999999999999994) == 0
    assert labelgrid.round_half_up(2.5) == 3
    assert labelgrid.round_half_up(4.4999999999999995) == 4


@given(st.floats(0, 1e6, allow_nan=False))
def test_round_half_up_against_decimal(x):
    assert labelgrid.round_half_up(x) == oracle_round(x)


def test_invalid_interval():
    for a, b in ((2.0, 2.0), (3.0, 1.0), (-0.5, 1.0)):
        with pytest.raises(InvalidInterval):
            labelgrid.round_interval(a, b)


def test_segment_matrix_examples():
    assert labelgrid.to_segment_matrix(LabelTrack([], 5.0), 6).shape == (5, 6)
    assert not labelgrid.to_segment_matrix(LabelTrack([], 5.0), 6).any()
    m = labelgrid.to_segment_matrix(LabelTrack([(2, 1.3, 3.6)], 5.0), 6)
    assert m.sum() == 3 and m[1:4, 2].all()
    twice = labelgrid.to_segment_matrix(LabelTrack([(2, 1.3, 3.6)] * 2, 5.0), 6)
    np.testing.assert_array_equal(m, twice)
    assert labelgrid.to_segment_matrix(LabelTrack([], 4.2), 1).shape == (5, 1)
    with pytest.raises(SpeciesIdOutOfRange):
        labelgrid.to_segment_matrix(LabelTrack([(6, 0, 1)], 2.0), 6)


def test_event_near_end_is_clipped_to_the_grid():
    m = labelgrid.to_segment_matrix(LabelTrack([(0, 3.2, 4.0)], 4.0), 1)
    assert m[:, 0].tolist() == [0, 0, 0, 1]


def test_adding_events_never_clears_cells():
    rng = np.random.default_rng(5)
    for _ in range(200):
        t = random_track(rng, 3)
        base = labelgrid.to_segment_matrix(t, 3)
        more = random_track(rng, 3)
        merged = LabelTrack(t.events + [e for e in more.events if e[2] <= t.recording_duration_s],
                            t.recording_duration_s)
        assert np.all(labelgrid.to_segment_matrix(merged, 3) >= base)


def test_upsample_to_frames():
    m = np.array([[1], [0]], dtype=np.uint8)
    assert labelgrid.upsample_to_frames(m, 3, 6)[:, 0].tolist() == [1, 1, 1, 0, 0, 0]
    assert labelgrid.upsample_to_frames(m, 3, 4)[:, 0].tolist() == [1, 1, 1, 0]
    np.testing.assert_array_equal(labelgrid.upsample_to_frames(m, 1, 2), m)
    assert not labelgrid.upsample_to_frames(np.zeros((4, 2), np.uint8), 100, 400).any()
    with pytest.raises(FrameCountOverflow):
        labelgrid.upsample_to_frames(m, 3, 7)


def test_dump_csv():
    assert labelgrid.dump_csv(np.array([[1, 0], [0, 1]])) == "1,0\n0,1\n"
