"""Segment table over a corpus, plus contrastive batch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pase.corpus.lips import CROP_SIZE, WINDOW, crop_lips, window_indices
from pase.corpus.segments import segment_clip
from pase.corpus.store import Corpus
from pase.errors import DataError
from pase.frontend import FrontendConfig, spectrogram


class SegmentDataset:
    """Every phoneme segment of a corpus with its spectrogram and lip crops.

    Crops are kept as uint8 per clip; 15-channel windows are assembled on
    demand by :meth:`windows`.
    """

    def __init__(self, corpus: Corpus, frontend: FrontendConfig | None = None, crop_size: int = CROP_SIZE):
        self.corpus = corpus
        self.inventory = corpus.inventory
        self.frontend = frontend or FrontendConfig()
        if self.frontend.sample_rate_hz != corpus.sample_rate:
            raise DataError(
                f"frontend expects {self.frontend.sample_rate_hz} Hz audio, corpus is {corpus.sample_rate} Hz"
            )
        self.crop_size = crop_size
        self.segments = []
        self.clip_of = []
        self.crops = []
        for ci, clip in enumerate(corpus.clips):
            segs = segment_clip(clip.audio, len(clip.frames), corpus.fps, clip.intervals, self.inventory,
                                corpus.sample_rate, clip.clip_id)
            self.segments.extend(segs)
            self.clip_of.extend([ci] * len(segs))
            self.crops.append(np.stack([crop_lips(f, lm, crop_size) for f, lm in zip(clip.frames, clip.landmarks)]))
        if not self.segments:
            raise DataError("corpus contains no phoneme segments")
        self.clip_of = np.array(self.clip_of)
        self.phoneme_ids = np.array([s.phoneme_id for s in self.segments])
        self.viseme_ids = np.array([self.inventory.viseme_of(p) for p in self.phoneme_ids])
        self.spectrograms = [spectrogram(s.audio, self.frontend).values.astype(np.float32) for s in self.segments]

    def __len__(self):
        return len(self.segments)

    def windows(self, index: int) -> np.ndarray:
        """``(T_v, 15, H, W)`` float32 windows, one centred on each segment frame."""
        crops = self.crops[self.clip_of[index]]
        frames = self.segments[index].frame_indices
        idx = np.stack([window_indices(f, len(crops), WINDOW) for f in frames])  # (T_v, 5)
        stack = crops[idx]  # (T_v, 5, H, W, 3)
        stack = stack.transpose(0, 1, 4, 2, 3).reshape(len(frames), 3 * WINDOW, self.crop_size, self.crop_size)
        return stack.astype(np.float32) / 255.0


@dataclass
class AlignmentBatch:
    """Anchor segments with one positive and ``K`` negative visual sequences each.

    All fields index into ``dataset``; the positive of anchor ``i`` is its own
    window sequence, its negatives are ``negatives[i]``.
    """

    dataset: SegmentDataset
    anchors: np.ndarray  # (B,)
    negatives: np.ndarray  # (B, K)
    phoneme_ids: np.ndarray  # (B,)

    def __len__(self):
        return len(self.anchors)

    @property
    def spectrograms(self):
        return [self.dataset.spectrograms[i] for i in self.anchors]

    @property
    def positives(self):
        return [self.dataset.windows(i) for i in self.anchors]

    def negative_windows(self, i):
        return [self.dataset.windows(j) for j in self.negatives[i]]

    def unique_segments(self) -> np.ndarray:
        return np.unique(np.concatenate([self.anchors, self.negatives.ravel()]))


def sample_batch(dataset: SegmentDataset, batch_size: int = 16, negatives_per_anchor: int = 4,
                 rng_seed=0, pool: str = "corpus") -> AlignmentBatch:
    """Draw anchors uniformly; negatives come from other viseme classes.

    ``pool="corpus"`` draws each anchor's negatives uniformly from all
    segments of a different viseme class. ``pool="batch"`` draws them from the
    other anchors of a different class first (each is still a uniform draw
    over such segments) and tops up from the corpus when the batch has too
    few; this keeps the number of distinct visual sequences per step at
    roughly ``batch_size``.
    """
    if pool not in ("corpus", "batch"):
        raise ValueError(f"unknown negative pool {pool!r}")
    if batch_size < 1 or negatives_per_anchor < 0:
        raise ValueError("batch_size must be positive and negatives_per_anchor non-negative")
    visemes = dataset.viseme_ids
    if len(np.unique(visemes)) < 2:
        raise DataError("no valid negatives: corpus has a single viseme class")
    rng = np.random.default_rng(rng_seed)
    n = len(dataset)
    anchors = rng.choice(n, size=batch_size, replace=n < batch_size)
    k = negatives_per_anchor
    negatives = np.empty((batch_size, k), dtype=np.int64)
    for i, a in enumerate(anchors):
        chosen = np.empty(0, dtype=np.int64)
        if pool == "batch":
            others = np.array([anchors[j] for j in range(batch_size) if j != i and visemes[anchors[j]] != visemes[a]],
                              dtype=np.int64)
            chosen = rng.choice(others, size=min(k, len(others)), replace=False) if len(others) else chosen
        need = k - len(chosen)
        if need:
            candidates = np.flatnonzero(visemes != visemes[a])
            extra = rng.choice(candidates, size=need, replace=len(candidates) < need)
            chosen = np.concatenate([chosen, extra])
        negatives[i] = chosen
    return AlignmentBatch(dataset, anchors, negatives, dataset.phoneme_ids[anchors])
