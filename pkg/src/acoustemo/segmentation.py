"""Timestamp-to-frame mapping and the two windowing schemes.

Times are converted to exact rationals before multiplying by the frame rate,
so a boundary that lands on a frame edge (``t * f_s`` integral) never picks up
a spurious extra frame from binary rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Real
from typing import NamedTuple

import numpy as np

__all__ = [
    "FrameFeatureSequence",
    "UtteranceSpan",
    "FrameSpan",
    "Segment",
    "InvalidSpan",
    "EmptySegment",
    "as_fraction",
    "map_span",
    "extract_segments",
    "fixed_windows",
]


class InvalidSpan(ValueError):
    pass


class EmptySegment(ValueError):
    def __init__(self, message: str, utterance_index: int | None = None):
        super().__init__(message)
        self.utterance_index = utterance_index


def as_fraction(x) -> Fraction:
    """Exact rational for a time or rate; floats go through their shortest repr."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, Real):
        if not math.isfinite(float(x)):
            raise InvalidSpan(f"non-finite value {x!r}")
        return Fraction(repr(float(x)))
    return Fraction(str(x))


@dataclass(frozen=True)
class FrameFeatureSequence:
    features: np.ndarray
    f_s: Fraction
    source_id: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty L x d matrix, got {feats.shape}")
        fs = as_fraction(self.f_s)
        if fs <= 0:
            raise ValueError("f_s must be positive")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "f_s", fs)

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def duration_seconds(self) -> Fraction:
        return Fraction(self.length) / self.f_s


@dataclass(frozen=True)
class UtteranceSpan:
    index: int
    t_start: float
    t_end: float
    text: str = ""

    def __post_init__(self):
        if self.t_start < 0:
            raise InvalidSpan(f"utterance {self.index}: negative start {self.t_start}")
        if not self.t_start < self.t_end:
            raise InvalidSpan(f"utterance {self.index}: t_start {self.t_start} >= t_end {self.t_end}")


@dataclass(frozen=True)
class FrameSpan:
    i_start: int
    i_end: int
    clamped: bool = False

    @property
    def length(self) -> int:
        return self.i_end - self.i_start


class Segment(NamedTuple):
    span: UtteranceSpan
    features: np.ndarray
    frames: FrameSpan


def map_span(span: UtteranceSpan, f_s, length: int) -> FrameSpan:
    """Frame index range ``[floor(t_start*f_s), ceil(t_end*f_s))`` clamped to ``[0, length]``."""
    fs = as_fraction(f_s)
    if fs <= 0:
        raise ValueError("f_s must be positive")
    if length < 1:
        raise ValueError("length must be >= 1")
    t0, t1 = as_fraction(span.t_start), as_fraction(span.t_end)
    if t0 >= t1:
        raise InvalidSpan(f"utterance {span.index}: t_start >= t_end")
    raw_start = math.floor(t0 * fs)
    raw_end = math.ceil(t1 * fs)
    i_start = min(max(raw_start, 0), length)
    i_end = min(max(raw_end, 0), length)
    if i_start >= i_end:
        raise EmptySegment(
            f"utterance {span.index}: no frames in [{raw_start}, {raw_end}) for L={length}",
            span.index,
        )
    return FrameSpan(i_start, i_end, clamped=(i_start, i_end) != (raw_start, raw_end))


def extract_segments(seq: FrameFeatureSequence, spans: list[UtteranceSpan]) -> list[Segment]:
    """Slice one copied feature segment per utterance.

    All spans are mapped before anything is returned, so a bad span yields an
    error and no partial output.
    """
    frame_spans = [map_span(span, seq.f_s, seq.length) for span in spans]
    return [Segment(span, seq.features[fr.i_start:fr.i_end].copy(), fr)
            for span, fr in zip(spans, frame_spans)]


def fixed_windows(seq: FrameFeatureSequence, window_seconds) -> list[FrameSpan]:
    """Consecutive non-overlapping windows of ``window_seconds``; a partial tail is kept."""
    w = as_fraction(window_seconds)
    if w <= 0:
        raise ValueError("window_seconds must be positive")
    spans = []
    k = 0
    while True:
        start = math.floor(k * w * seq.f_s)
        if start >= seq.length:
            break
        end = min(math.floor((k + 1) * w * seq.f_s), seq.length)
        if end > start:
            spans.append(FrameSpan(start, end))
        k += 1
    return spans
