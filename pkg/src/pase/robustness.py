"""Masked prediction and reconstruction on embedding sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from pase.errors import DataError


def mask_count(T: int, ratio: float) -> int:
    # half-up rounding, not Python's banker's rounding
    return min(T, int(math.floor(ratio * T + 0.5)))


@dataclass
class MaskPlan:
    mask: np.ndarray  # (T,) bool
    ratio: float

    @classmethod
    def draw(cls, T: int, ratio: float, rng) -> "MaskPlan":
        """Mask exactly ``round(ratio * T)`` time steps chosen uniformly without replacement."""
        if not 0.0 <= ratio < 1.0:
            raise ValueError("mask ratio must lie in [0, 1)")
        mask = np.zeros(T, dtype=bool)
        mask[rng.choice(T, size=mask_count(T, ratio), replace=False)] = True
        return cls(mask, ratio)


def apply_mask(seq, mask, fill):
    """Replace rows of ``seq`` (..., T, D) where ``mask`` (..., T) is true by ``fill`` (D,)."""
    mask = torch.as_tensor(mask, dtype=torch.bool, device=seq.device)
    if mask.shape != seq.shape[:-1]:
        raise DataError(f"mask shape {tuple(mask.shape)} does not match sequence {tuple(seq.shape)}")
    return torch.where(mask[..., None], fill.to(seq.dtype).expand_as(seq), seq)


class ReconstructionHead(nn.Module):
    """Learned fill vectors and a per-step affine map for each modality."""

    def __init__(self, dim: int = 512):
        super().__init__()
        self.audio_fill = nn.Parameter(torch.randn(dim) * 0.02)
        self.visual_fill = nn.Parameter(torch.randn(dim) * 0.02)
        self.audio = nn.Linear(dim, dim)
        self.visual = nn.Linear(dim, dim)


def reconstruct(masked, affine: nn.Linear):
    return affine(masked)


def reconstruction_loss(v_rec, v_orig, a_rec, a_orig, v_mask=None, a_mask=None):
    """Squared error summed over both modalities, divided by the element count.

    Optional boolean ``(..., T)`` masks mark valid (non-padding) rows; only
    those rows count, both in the sum and in the element count.
    """
    if v_rec.shape != v_orig.shape or a_rec.shape != a_orig.shape:
        raise DataError("reconstruction and original shapes differ")
    total, count = 0.0, 0
    for rec, orig, valid in ((v_rec, v_orig, v_mask), (a_rec, a_orig, a_mask)):
        sq = (rec - orig) ** 2
        if valid is None:
            total = total + sq.sum()
            count += sq.numel()
        else:
            w = valid.to(sq.dtype)[..., None]
            total = total + (sq * w).sum()
            count += int(valid.sum()) * sq.shape[-1]
    if count == 0:
        raise DataError("nothing to reconstruct")
    return total / count
