"""Phoneme-aware query, cross-attention fusion and the contrastive objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from pase.errors import DataError


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    alpha: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


class PhonemeEmbeddingTable(nn.Module):
    def __init__(self, n_phonemes: int, dim: int = 512):
        super().__init__()
        self.table = nn.Parameter(torch.randn(n_phonemes, dim) * 0.02)

    def forward(self, phoneme_ids):
        ids = torch.as_tensor(phoneme_ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.table.shape[0]):
            raise DataError(f"unknown phoneme id in {ids.tolist()}")
        return self.table[ids]


def build_query(a_p, phoneme_ids, table: PhonemeEmbeddingTable):
    """Anchor plus its phoneme's label embedding."""
    return a_p + table(phoneme_ids)


class CrossAttention(nn.Module):
    """Scaled dot-product attention of one query over a key/value sequence.

    No output projection: the result is the attention-weighted average of
    the projected values (heads concatenated).
    """

    def __init__(self, dim: int = 512, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim, self.heads = dim, heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)

    def forward(self, q, kv, kv_mask=None, return_weights=False):
        """``q``: (B, D); ``kv``: (B, T, D); ``kv_mask``: (B, T) true on valid rows.

        Returns ``(B, D)`` and optionally the ``(B, heads, T)`` weights.
        """
        if kv.shape[-2] == 0:
            raise DataError("cross-attention over an empty sequence")
        B, T, D = kv.shape
        h, dh = self.heads, D // self.heads
        qh = self.w_q(q).view(B, h, 1, dh)
        kh = self.w_k(kv).view(B, T, h, dh).transpose(1, 2)
        vh = self.w_v(kv).view(B, T, h, dh).transpose(1, 2)
        scores = (qh @ kh.transpose(-1, -2)) / math.sqrt(dh)  # (B, h, 1, T)
        if kv_mask is not None:
            if not bool(kv_mask.any(-1).all()):
                raise DataError("cross-attention over an empty sequence")
            scores = scores.masked_fill(~kv_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ vh).reshape(B, D)
        if return_weights:
            return out, weights[:, :, 0]
        return out


def fuse_pair(a_p, phoneme_ids, visual_seq, table, attention, visual_mask=None):
    """Fuse a visual sequence under the anchor's phoneme-aware query."""
    return attention(build_query(a_p, phoneme_ids, table), visual_seq, visual_mask)


def cosine_similarity(x, y, eps: float = 1e-12):
    nx, ny = x.norm(dim=-1), y.norm(dim=-1)
    if bool((nx <= eps).any()) or bool((ny <= eps).any()):
        raise DataError("zero-norm embedding")
    return (x * y).sum(-1) / (nx * ny)


def contrastive_from_similarities(pos_sim, neg_sim, tau: float):
    """``-log softmax`` of the positive among ``[pos, negs...]`` at temperature ``tau``.

    ``pos_sim``: (B,), ``neg_sim``: (B, K). Returns per-anchor losses (B,).
    """
    logits = torch.cat([pos_sim[:, None], neg_sim], dim=1) / tau
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def contrastive_loss(anchor, pos, negs, cfg: ContrastiveConfig = ContrastiveConfig()):
    """InfoNCE with cosine similarity; ``anchor``/``pos``: (D,) or (B, D), ``negs``: (K, D) or (B, K, D)."""
    single = anchor.ndim == 1
    if isinstance(negs, (list, tuple)):
        negs = torch.stack(list(negs)) if negs else anchor.new_zeros(*anchor.shape[:-1], 0, anchor.shape[-1])
    if single:
        anchor, pos, negs = anchor[None], pos[None], negs.reshape(1, -1, anchor.shape[-1])
    pos_sim = cosine_similarity(anchor, pos)
    neg_sim = cosine_similarity(anchor[:, None, :], negs) if negs.shape[1] else anchor.new_zeros(len(anchor), 0)
    loss = contrastive_from_similarities(pos_sim, neg_sim, cfg.tau)
    return loss[0] if single else loss.mean()


def total_loss(l_con, l_rec, cfg: ContrastiveConfig = ContrastiveConfig()):
    return l_con + cfg.alpha * l_rec
