"""Cut a clip into phoneme-level audio slices and their overlapping video frames."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pase.corpus.alignment import PhonemeInterval
from pase.errors import DataError

FPS = 25
_EPS = 1e-9


@dataclass
class PhonemeSegment:
    phoneme_id: int
    audio: np.ndarray
    frame_indices: list
    clip_id: str
    interval: PhonemeInterval | None = field(default=None, compare=False)


def sample_bounds(interval: PhonemeInterval, sample_rate: int) -> tuple[int, int]:
    # rounding the boundaries (not the duration) keeps adjacent slices tiling exactly
    return round(interval.start_s * sample_rate), round(interval.end_s * sample_rate)


def frames_in_interval(start_s: float, end_s: float, frame_count: int, fps: int = FPS) -> list[int]:
    """Frames ``f`` with ``f / fps`` in ``[start_s, end_s)``; else the midpoint frame."""
    first = math.ceil(start_s * fps - _EPS)
    last = math.ceil(end_s * fps - _EPS) - 1
    frames = [f for f in range(first, last + 1) if 0 <= f < frame_count]
    if not frames:
        mid = math.floor((start_s + end_s) / 2 * fps + _EPS)
        frames = [min(max(mid, 0), frame_count - 1)]
    return frames


def segment_clip(audio, frame_count: int, fps: int, intervals, inventory, sample_rate: int = 16000,
                 clip_id: str = "") -> list[PhonemeSegment]:
    """One :class:`PhonemeSegment` per interval, in interval order."""
    audio = np.asarray(audio, dtype=np.float64)
    if frame_count < 1:
        raise DataError(f"clip {clip_id!r} has no video frames")
    segments = []
    for iv in intervals:
        lo, hi = sample_bounds(iv, sample_rate)
        if hi > audio.size:
            raise DataError(
                f"clip {clip_id!r}: interval {iv.phoneme} {iv.start_s}-{iv.end_s}s runs past the audio end "
                f"({audio.size / sample_rate:.3f}s)"
            )
        if hi <= lo:
            raise DataError(f"clip {clip_id!r}: interval {iv.phoneme} shorter than one sample")
        if iv.phoneme not in inventory.labels:
            raise DataError(f"clip {clip_id!r}: phoneme {iv.phoneme!r} is not in the inventory")
        segments.append(
            PhonemeSegment(
                phoneme_id=inventory.index(iv.phoneme),
                audio=audio[lo:hi],
                frame_indices=frames_in_interval(iv.start_s, iv.end_s, frame_count, fps),
                clip_id=clip_id,
                interval=iv,
            )
        )
    return segments
