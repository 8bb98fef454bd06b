"""Event labels to one-second binary segment matrices."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import FrameCountOverflow, InvalidInterval, SpeciesIdOutOfRange

SEGMENT_LENGTH_S = 1.0


def round_half_up(x: float) -> int:
    # x - floor(x) is exact in binary floating point; floor(x + 0.5) is not
    f = math.floor(x)
    return int(f) + (1 if x - f >= 0.5 else 0)


def round_interval(start_s: float, end_s: float) -> tuple[int, int]:
    """Segment index range ``[start_idx, end_idx)`` covered by an event.

    Both ends go to the nearest second (ties upward). An event that rounds to an
    empty range labels the segment holding its midpoint instead.
    """
    if not 0 <= start_s < end_s:
        raise InvalidInterval(f"need 0 <= start < end, got ({start_s}, {end_s})")
    a, b = round_half_up(start_s), round_half_up(end_s)
    if a == b:
        m = math.floor((Fraction(start_s) + Fraction(end_s)) / 2)  # exact; a float sum can round up
        return m, m + 1
    return a, b


def n_segments(duration_s: float) -> int:
    return int(math.ceil(duration_s - 1e-9)) if duration_s > 0 else 0


def to_segment_matrix(track, species_count: int) -> np.ndarray:
    """T x C uint8 matrix, T = ceil(duration)."""
    T = n_segments(track.recording_duration_s)
    m = np.zeros((T, species_count), dtype=np.uint8)
    for sid, a, b in track.events:
        if not 0 <= sid < species_count:
            raise SpeciesIdOutOfRange(f"species id {sid} with {species_count} species")
        i, j = round_interval(a, b)
        m[i:min(j, T), sid] = 1
    return m


def upsample_to_frames(m: np.ndarray, fps: int, total_frames: int) -> np.ndarray:
    """Repeat each segment row ``fps`` times; row f is segment f // fps."""
    if fps < 1:
        raise ValueError("fps must be >= 1")
    if total_frames > m.shape[0] * fps:
        raise FrameCountOverflow(f"{total_frames} frames requested from {m.shape[0]} segments at {fps} fps")
    return m[np.arange(total_frames) // fps]


def dump_csv(m: np.ndarray) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in m)
