"""Full encoder: audio and visual towers, phoneme table, fusion and reconstruction heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from pase.alignment import (
    ContrastiveConfig,
    CrossAttention,
    PhonemeEmbeddingTable,
    contrastive_from_similarities,
    cosine_similarity,
    fuse_pair,
)
from pase.audio_encoder import CNNAudioEncoder, GRUAudioEncoder
from pase.frontend import FrontendConfig
from pase.robustness import MaskPlan, ReconstructionHead, apply_mask, reconstruction_loss
from pase.visual_encoder import VisualEncoder, scaled_stack


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 512
    gru_layers: int = 8
    encoder: str = "gru"  # or "cnn"
    pooling: str = "last"  # or "mean"
    heads: int = 1
    cnn_channels: int = 256
    batch_norm: bool = False

    def __post_init__(self):
        if self.encoder not in ("gru", "cnn"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if 512 % self.embed_dim:
            raise ValueError("embed_dim must divide 512")

    def to_dict(self):
        return asdict(self)


class PaseModel(nn.Module):
    def __init__(self, config: ModelConfig, frontend: FrontendConfig, n_phonemes: int):
        super().__init__()
        self.config, self.frontend, self.n_phonemes = config, frontend, n_phonemes
        d = config.embed_dim
        if config.encoder == "gru":
            self.audio = GRUAudioEncoder(frontend.n_bins, d, config.gru_layers, config.pooling)
        else:
            self.audio = CNNAudioEncoder(frontend.n_bins, d, config.cnn_channels)
        self.visual = VisualEncoder(scaled_stack(d), batch_norm=config.batch_norm)
        self.phonemes = PhonemeEmbeddingTable(n_phonemes, d)
        self.attention = CrossAttention(d, config.heads)
        self.reconstruction = ReconstructionHead(d)

    @property
    def dtype(self):
        return self.phonemes.table.dtype

    def embed_audio(self, spec, lengths=None):
        """Returns ``(sequence (B, T', D), pooled (B, D), sequence lengths (B,))``."""
        if lengths is None:
            lengths = torch.full((spec.shape[0],), spec.shape[1], dtype=torch.long)
        seq, pooled = self.audio(spec, lengths)
        return seq, pooled, self.audio.sequence_lengths(lengths)

    def embed_visual(self, windows):
        return self.visual(windows)

    def fuse(self, a_p, phoneme_ids, visual_seq, visual_mask=None):
        return fuse_pair(a_p, phoneme_ids, visual_seq, self.phonemes, self.attention, visual_mask)


def build_model(config: ModelConfig, frontend: FrontendConfig, n_phonemes: int, seed: int = 0,
                dtype=torch.float32) -> PaseModel:
    """Seeded construction: identical ``seed`` gives identical initial parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PaseModel(config, frontend, n_phonemes)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# batch collation


def pad_sequences(arrays, dtype=torch.float32):
    """List of ``(T_i, ...)`` arrays -> right-padded tensor ``(B, T_max, ...)`` and lengths."""
    lengths = torch.tensor([len(a) for a in arrays], dtype=torch.long)
    out = torch.zeros((len(arrays), int(lengths.max())) + tuple(arrays[0].shape[1:]), dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = torch.as_tensor(np.asarray(a), dtype=dtype)
    return out, lengths


def length_mask(lengths, T):
    return torch.arange(T)[None, :] < lengths[:, None]


@dataclass
class BatchTensors:
    """An :class:`AlignmentBatch` materialised as tensors, plus its mask plans."""

    spec: torch.Tensor  # (B, T, F)
    spec_lengths: torch.Tensor  # (B,)
    phoneme_ids: torch.Tensor  # (B,)
    windows: torch.Tensor  # (N_w, 15, H, W) for all distinct segments
    window_counts: torch.Tensor  # (U,) windows per distinct segment
    pos_index: torch.Tensor  # (B,) into distinct segments
    neg_index: torch.Tensor  # (B, K) into distinct segments
    audio_mask: torch.Tensor  # (B, T') bool
    visual_mask: torch.Tensor  # (B, Tv) bool, for each anchor's own visual sequence


def collate(batch, model: PaseModel, mask_ratio: float = 0.15, rng_audio=None, rng_visual=None) -> BatchTensors:
    """Distinct segments (anchors and negatives) are encoded once per step."""
    dtype = model.dtype
    ds = batch.dataset
    spec, spec_lengths = pad_sequences(batch.spectrograms, dtype)
    unique = batch.unique_segments()
    where = {int(s): i for i, s in enumerate(unique)}
    win_list = [ds.windows(int(s)) for s in unique]
    windows = torch.as_tensor(np.concatenate(win_list), dtype=dtype)
    counts = torch.tensor([len(w) for w in win_list], dtype=torch.long)
    pos_index = torch.tensor([where[int(a)] for a in batch.anchors], dtype=torch.long)
    neg_index = torch.tensor([[where[int(n)] for n in row] for row in batch.negatives], dtype=torch.long)
    neg_index = neg_index.reshape(len(batch.anchors), -1)

    seq_lengths = model.audio.sequence_lengths(spec_lengths)
    rng_audio = rng_audio or np.random.default_rng(0)
    rng_visual = rng_visual or np.random.default_rng(1)
    a_mask = torch.zeros(len(seq_lengths), int(seq_lengths.max()), dtype=torch.bool)
    for i, n in enumerate(seq_lengths.tolist()):
        a_mask[i, :n] = torch.from_numpy(MaskPlan.draw(n, mask_ratio, rng_audio).mask)
    pos_counts = counts[pos_index]
    v_mask = torch.zeros(len(pos_counts), int(counts.max()), dtype=torch.bool)
    for i, n in enumerate(pos_counts.tolist()):
        v_mask[i, :n] = torch.from_numpy(MaskPlan.draw(n, mask_ratio, rng_visual).mask)
    return BatchTensors(spec, spec_lengths, torch.as_tensor(batch.phoneme_ids, dtype=torch.long), windows, counts,
                        pos_index, neg_index, a_mask, v_mask)


def visual_sequences(model: PaseModel, windows, counts):
    """Encode all windows and regroup them into padded per-segment sequences ``(U, Tv, D)`` + mask."""
    emb = model.embed_visual(windows)
    T = int(counts.max())
    seqs = emb.new_zeros(len(counts), T, emb.shape[-1])
    rows = torch.repeat_interleave(torch.arange(len(counts)), counts)
    cols = torch.cat([torch.arange(int(c)) for c in counts])
    seqs = seqs.index_put((rows, cols), emb)
    return seqs, length_mask(counts, T)


def compute_losses(model: PaseModel, bt: BatchTensors, cfg: ContrastiveConfig):
    """Contrastive, reconstruction and total loss for one batch (tensors, differentiable)."""
    seq_a, a_p, a_len = model.embed_audio(bt.spec, bt.spec_lengths)
    vis, vis_valid = visual_sequences(model, bt.windows, bt.window_counts)

    B, K = bt.neg_index.shape
    pos_seq, pos_valid = vis[bt.pos_index], vis_valid[bt.pos_index]
    f_pos = model.fuse(a_p, bt.phoneme_ids, pos_seq, pos_valid)
    pos_sim = cosine_similarity(a_p, f_pos)
    if K:
        flat = bt.neg_index.reshape(-1)
        f_neg = model.fuse(a_p.repeat_interleave(K, 0), bt.phoneme_ids.repeat_interleave(K), vis[flat],
                           vis_valid[flat]).view(B, K, -1)
        neg_sim = cosine_similarity(a_p[:, None, :], f_neg)
    else:
        neg_sim = a_p.new_zeros(B, 0)
    l_con = contrastive_from_similarities(pos_sim, neg_sim, cfg.tau).mean()

    head = model.reconstruction
    a_valid = length_mask(a_len, seq_a.shape[1])
    a_rec = head.audio(apply_mask(seq_a, bt.audio_mask[:, : seq_a.shape[1]], head.audio_fill))
    v_rec = head.visual(apply_mask(pos_seq, bt.visual_mask[:, : pos_seq.shape[1]], head.visual_fill))
    l_rec = reconstruction_loss(v_rec, pos_seq, a_rec, seq_a, pos_valid, a_valid)
    return {"total": l_con + cfg.alpha * l_rec, "con": l_con, "rec": l_rec}
