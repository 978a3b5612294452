"""Desk-scale evaluation: retrieval accuracy, phoneme ambiguity, per-frame feature export, PCA plots."""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from pase.alignment import cosine_similarity
from pase.corpus import SegmentDataset
from pase.errors import DataError, FeatureFileError
from pase.frontend import FrontendConfig, spectrogram
from pase.model import length_mask, pad_sequences

FEATURE_FPS = 25
CONTEXT_FRAMES = 5


# ---------------------------------------------------------------------------
# per-frame features


@dataclass
class FeatureTrack:
    frames: np.ndarray  # (N, D) float32
    fps: int = FEATURE_FPS
    source_audio: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise DataError("feature frames must be a 2-D (N, dim) array")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("feature frames must be finite")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return len(self.frames)


def context_windows(audio, sample_rate: int, fps: int = FEATURE_FPS, context: int = CONTEXT_FRAMES) -> np.ndarray:
    """``(N, context * sr / fps)`` zero-padded windows centred on each frame time ``t / fps``."""
    audio = np.asarray(audio, dtype=np.float64)
    period = sample_rate // fps
    if sample_rate % fps:
        raise DataError(f"sample rate {sample_rate} is not a whole multiple of {fps} fps")
    if len(audio) < period:
        raise DataError(f"audio shorter than one frame period ({len(audio)} < {period} samples)")
    n = math.ceil(len(audio) * fps / sample_rate)
    half = context * period // 2
    padded = np.concatenate([np.zeros(half), audio, np.zeros(n * period + half)])
    starts = np.arange(n) * period  # window for frame t covers [t*period - half, t*period + half)
    return np.stack([padded[s : s + 2 * half] for s in starts])


@torch.no_grad()
def extract_features(audio, model, frontend: FrontendConfig | None = None, batch_size: int = 64,
                     source_audio: str = "") -> FeatureTrack:
    """Pooled audio embedding for every 1/25 s video frame, from a centred 5-frame context."""
    frontend = frontend or model.frontend
    windows = context_windows(audio, frontend.sample_rate_hz)
    specs = [spectrogram(w, frontend).values for w in windows]
    rows = []
    for i in range(0, len(specs), batch_size):
        spec, lengths = pad_sequences(specs[i : i + batch_size], model.dtype)
        _, pooled, _ = model.embed_audio(spec, lengths)
        rows.append(pooled.float().numpy())
    return FeatureTrack(np.concatenate(rows), FEATURE_FPS, source_audio)


# Feature file layout, little-endian:
#   4 bytes magic b"PASE" | u16 version | u16 dim | u16 fps | u32 frame count | count * dim float32 row-major
FEATURE_MAGIC = b"PASE"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHHHI")


def encode_features(track: FeatureTrack) -> bytes:
    if not 0 < track.dim < 2**16 or len(track) >= 2**32 or not 0 < track.fps < 2**16:
        raise DataError("feature track does not fit the file header fields")
    head = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, track.dim, track.fps, len(track))
    return head + track.frames.astype("<f4").tobytes()


def decode_features(raw: bytes, source: str = "") -> FeatureTrack:
    if raw[:4] != FEATURE_MAGIC[: len(raw[:4])]:
        raise FeatureFileError("bad_magic", "bad magic: not a feature file")
    if len(raw) < _FEATURE_HEADER.size:
        raise FeatureFileError("truncated_header", "truncated header")
    _, version, dim, fps, count = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise FeatureFileError("bad_version", f"unsupported feature file version {version}")
    if dim == 0 or fps != FEATURE_FPS:
        raise FeatureFileError("inconsistent_header", f"inconsistent header: dim={dim}, fps={fps}")
    payload = len(raw) - _FEATURE_HEADER.size
    expected = count * dim * 4
    if payload != expected:
        # a payload that is a whole number of rows of some other width means the header lies;
        # anything else is a cut-off file
        if payload > expected or (count and payload and payload % (4 * count) == 0):
            raise FeatureFileError("inconsistent_header",
                                   f"inconsistent header: {count}x{dim} floats declared, {payload} payload bytes")
        raise FeatureFileError("truncated_payload", f"truncated payload: {payload} of {expected} bytes")
    frames = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(count, dim)
    return FeatureTrack(frames.astype(np.float32), fps, source)


def export_features(track: FeatureTrack, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_features(track))
    return path


def import_features(path) -> FeatureTrack:
    return decode_features(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# segment-level embeddings


@torch.no_grad()
def audio_embeddings(model, dataset: SegmentDataset, batch_size: int = 64) -> torch.Tensor:
    """Pooled anchor ``A_p`` for every segment, ``(S, D)``."""
    out = []
    for i in range(0, len(dataset), batch_size):
        spec, lengths = pad_sequences(dataset.spectrograms[i : i + batch_size], model.dtype)
        out.append(model.embed_audio(spec, lengths)[1])
    return torch.cat(out)


@torch.no_grad()
def visual_embeddings(model, dataset: SegmentDataset, batch_windows: int = 128):
    """Per-segment visual sequences, padded: ``(S, T_max, D)`` and the ``(S, T_max)`` validity mask."""
    wins = [dataset.windows(i) for i in range(len(dataset))]
    counts = torch.tensor([len(w) for w in wins])
    flat = np.concatenate(wins)
    emb = torch.cat([model.embed_visual(torch.as_tensor(flat[i : i + batch_windows], dtype=model.dtype))
                     for i in range(0, len(flat), batch_windows)])
    T = int(counts.max())
    seqs = emb.new_zeros(len(wins), T, emb.shape[-1])
    valid = length_mask(counts, T)
    seqs[valid] = emb
    return seqs, valid


def draw_distractors(viseme_ids, k: int, seed: int = 0) -> np.ndarray:
    """``(S, k)`` distinct distractor indices per segment, all from other viseme classes."""
    viseme_ids = np.asarray(viseme_ids)
    rng = np.random.default_rng(seed)
    out = np.empty((len(viseme_ids), k), dtype=np.int64)
    for i, v in enumerate(viseme_ids):
        cands = np.flatnonzero(viseme_ids != v)
        if len(cands) < k:
            raise DataError(f"insufficient distractors: segment {i} has {len(cands)} from other classes, need {k}")
        out[i] = rng.choice(cands, size=k, replace=False)
    return out


@torch.no_grad()
def retrieval_scores(model, dataset: SegmentDataset, k_negatives: int = 4, seed: int = 0):
    """Similarities ``(S, 1 + k)``: column 0 is each segment's own visual sequence, the rest distractors."""
    a_p = audio_embeddings(model, dataset)
    vis, valid = visual_embeddings(model, dataset)
    ids = torch.as_tensor(dataset.phoneme_ids)
    cand = np.concatenate([np.arange(len(dataset))[:, None], draw_distractors(dataset.viseme_ids, k_negatives, seed)],
                          axis=1)
    cols = []
    for j in range(cand.shape[1]):
        idx = torch.as_tensor(cand[:, j])
        cols.append(cosine_similarity(a_p, model.fuse(a_p, ids, vis[idx], valid[idx])))
    return torch.stack(cols, dim=1)


def retrieval_accuracy(model, corpus, k_negatives: int = 4, seed: int = 0) -> float:
    """Fraction of segments whose own visual sequence strictly outranks ``k`` other-viseme distractors."""
    if k_negatives < 0:
        raise ValueError("k_negatives must be non-negative")
    dataset = corpus if isinstance(corpus, SegmentDataset) else SegmentDataset(corpus, model.frontend)
    if k_negatives == 0:
        return 1.0
    scores = retrieval_scores(model, dataset, k_negatives, seed)
    return float((scores[:, 0] > scores[:, 1:].max(dim=1).values).double().mean())


# ---------------------------------------------------------------------------
# ambiguity analysis


@dataclass
class AmbiguityReport:
    pairs: dict  # (label, label) -> mean cosine similarity
    same_viseme: list = field(default_factory=list)  # pairs sharing a class
    cross_viseme: list = field(default_factory=list)

    @property
    def same_viseme_mean(self) -> float:
        return float(np.mean([self.pairs[p] for p in self.same_viseme])) if self.same_viseme else float("nan")

    @property
    def cross_viseme_mean(self) -> float:
        return float(np.mean([self.pairs[p] for p in self.cross_viseme])) if self.cross_viseme else float("nan")

    @property
    def gap(self) -> float:
        return self.same_viseme_mean - self.cross_viseme_mean

    def to_records(self) -> list[str]:
        lines = [f"pair={a},{b} similarity={s:.6f} group={self._group((a, b))}" for (a, b), s in self.pairs.items()]
        lines.append(f"same_viseme_mean={self.same_viseme_mean:.6f}")
        lines.append(f"cross_viseme_mean={self.cross_viseme_mean:.6f}")
        lines.append(f"gap={self.gap:.6f}")
        return lines

    def to_text(self) -> str:
        rows = [f"  /{a}/ vs /{b}/  {s:+.4f}  ({self._group((a, b))})" for (a, b), s in self.pairs.items()]
        return "\n".join(
            ["Mean cosine similarity of pooled audio embeddings"] + rows
            + [f"same-viseme mean  {self.same_viseme_mean:+.4f}", f"cross-viseme mean {self.cross_viseme_mean:+.4f}",
               f"gap               {self.gap:+.4f}"]
        )

    def _group(self, pair) -> str:
        if pair[0] == pair[1]:
            return "self"
        return "same_viseme" if pair in self.same_viseme else "cross_viseme"


def _mean_cosine(x: torch.Tensor, y: torch.Tensor, exclude_diagonal: bool) -> float:
    sims = cosine_similarity(x[:, None, :], y[None, :, :])
    if exclude_diagonal:
        n = len(x)
        if n < 2:
            return 1.0
        return float((sims.sum() - sims.diagonal().sum()) / (n * (n - 1)))
    return float(sims.mean())


def ambiguity_report(model, corpus, pairs=None) -> AmbiguityReport:
    """Mean pairwise cosine similarity between pooled audio embeddings of phoneme pairs.

    ``pairs`` defaults to every unordered pair of distinct phonemes that occur
    in ``corpus``. Self pairs ``(p, p)`` average over distinct segments.
    """
    dataset = corpus if isinstance(corpus, SegmentDataset) else SegmentDataset(corpus, model.frontend)
    inv = dataset.inventory
    present = sorted(set(dataset.phoneme_ids.tolist()))
    if pairs is None:
        pairs = list(itertools.combinations([inv.labels[i] for i in present], 2))
    pairs = [tuple(p) for p in pairs]
    wanted = {lab for p in pairs for lab in p}
    unknown = sorted(lab for lab in wanted if lab not in inv.labels)
    if unknown:
        raise DataError(f"phonemes not in the inventory: {', '.join(unknown)}")
    missing = sorted(lab for lab in wanted if inv.index(lab) not in present)
    if missing:
        raise DataError(f"phonemes absent from the corpus: {', '.join(missing)}")
    emb = audio_embeddings(model, dataset).to(torch.float64)
    by_label = {lab: emb[torch.as_tensor(dataset.phoneme_ids == inv.index(lab))] for lab in wanted}
    result, same, cross = {}, [], []
    for a, b in pairs:
        result[(a, b)] = _mean_cosine(by_label[a], by_label[b], exclude_diagonal=a == b)
        if a != b:
            (same if inv.viseme_of(inv.index(a)) == inv.viseme_of(inv.index(b)) else cross).append((a, b))
    return AmbiguityReport(result, same, cross)


# ---------------------------------------------------------------------------
# projection


@dataclass
class Projection:
    points: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, D)
    mean: np.ndarray  # (D,)
    variances: np.ndarray  # (2,) eigenvalues of the retained components


def pca_2d(embeddings) -> Projection:
    """Top two principal components via the covariance eigendecomposition.

    Each component's sign is fixed so its largest-magnitude loading is
    positive. Identical points project to the origin.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise DataError("need at least 3 embeddings to project")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order].T.copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - len(comps), x.shape[1]))])
    for c in comps:
        j = np.argmax(np.abs(c))
        if c[j] < 0:
            c *= -1
    variances = np.clip(np.pad(vals[order], (0, 2 - len(order))), 0.0, None)
    return Projection(xc @ comps.T, comps, mean, variances)


def project_embeddings(embeddings, labels, path=None, title: str = "PCA of audio embeddings") -> Projection:
    """PCA to 2-D; with ``path`` also writes a deterministic SVG scatter coloured by label."""
    proj = pca_2d(embeddings)
    labels = list(labels)
    if len(labels) != len(proj.points):
        raise DataError("one label per embedding is required")
    if path is not None:
        _scatter_svg(proj.points, labels, Path(path), title)
    return proj


def _scatter_svg(points, labels, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "pase", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        cmap = plt.get_cmap("tab10")
        for i, lab in enumerate(sorted(set(labels), key=str)):
            sel = np.array([l == lab for l in labels])
            ax.scatter(points[sel, 0], points[sel, 1], s=14, color=cmap(i % 10), label=str(lab))
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title(title)
        ax.legend(fontsize=8, markerscale=1.2)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


@torch.no_grad()
def evaluate(model, corpus, k_negatives: int = 4, seed: int = 0) -> dict:
    """Retrieval accuracy and the same/cross-viseme similarity gap on one corpus."""
    dataset = corpus if isinstance(corpus, SegmentDataset) else SegmentDataset(corpus, model.frontend)
    report = ambiguity_report(model, dataset)
    return {
        "retrieval_accuracy": retrieval_accuracy(model, dataset, k_negatives, seed),
        "same_viseme_similarity": report.same_viseme_mean,
        "cross_viseme_similarity": report.cross_viseme_mean,
        "similarity_gap": report.gap,
    }
