"""Audio encoders: stacked GRU over spectrogram frames, and a strided CNN variant.

The GRU cell follows the concatenated-input form

    z = sigmoid(W_z [h, x] + b_z)
    r = sigmoid(W_r [h, x] + b_r)
    h~ = tanh(W_h [r * h, x] + b_h)
    h' = (1 - z) * h + z * h~

which differs from ``torch.nn.GRU`` (reset applied after the recurrent
matmul, gates swapped), hence the hand-written recurrence.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from pase.errors import DataError


def gru_cell_step(x_t, h_prev, w_z, w_r, w_h, b_z=None, b_r=None, b_h=None):
    """One GRU step for a single layer; weights are ``(H, H + I)`` on ``[h, x]``."""
    hidden = h_prev.shape[-1]
    if w_z.shape != (hidden, hidden + x_t.shape[-1]):
        raise DataError(f"weight shape {tuple(w_z.shape)} does not fit hidden {hidden}, input {x_t.shape[-1]}")
    hx = torch.cat([h_prev, x_t], dim=-1)
    z = torch.sigmoid(F.linear(hx, w_z, b_z))
    r = torch.sigmoid(F.linear(hx, w_r, b_r))
    cand = torch.tanh(F.linear(torch.cat([r * h_prev, x_t], dim=-1), w_h, b_h))
    return (1 - z) * h_prev + z * cand


class GRULayer(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        k = 1.0 / math.sqrt(hidden_dim)
        shape = (hidden_dim, hidden_dim + input_dim)
        self.w_z = nn.Parameter(torch.empty(shape).uniform_(-k, k))
        self.w_r = nn.Parameter(torch.empty(shape).uniform_(-k, k))
        self.w_h = nn.Parameter(torch.empty(shape).uniform_(-k, k))
        self.b_z = nn.Parameter(torch.empty(hidden_dim).uniform_(-k, k))
        self.b_r = nn.Parameter(torch.empty(hidden_dim).uniform_(-k, k))
        self.b_h = nn.Parameter(torch.empty(hidden_dim).uniform_(-k, k))

    def forward(self, x):
        """``x``: (B, T, I) -> (B, T, H), zero initial state."""
        H = self.hidden_dim
        # input halves of the three projections, hoisted out of the time loop
        xz = F.linear(x, self.w_z[:, H:], self.b_z)
        xr = F.linear(x, self.w_r[:, H:], self.b_r)
        xh = F.linear(x, self.w_h[:, H:], self.b_h)
        uz, ur, uh = self.w_z[:, :H], self.w_r[:, :H], self.w_h[:, :H]
        h = x.new_zeros(x.shape[0], H)
        out = []
        for t in range(x.shape[1]):
            z = torch.sigmoid(xz[:, t] + h @ uz.T)
            r = torch.sigmoid(xr[:, t] + h @ ur.T)
            cand = torch.tanh(xh[:, t] + (r * h) @ uh.T)
            h = (1 - z) * h + z * cand
            out.append(h)
        return torch.stack(out, dim=1)


def _lengths_mask(lengths, T, device):
    return torch.arange(T, device=device)[None, :] < lengths[:, None]


class GRUAudioEncoder(nn.Module):
    """Stacked unidirectional GRU; the anchor is the top layer at the last valid step."""

    def __init__(self, input_dim: int, hidden_dim: int = 512, layers: int = 8, pooling: str = "last"):
        super().__init__()
        if pooling not in ("last", "mean"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        dims = [input_dim] + [hidden_dim] * layers
        self.layers = nn.ModuleList(GRULayer(i, hidden_dim) for i in dims[:-1])
        self.input_dim, self.hidden_dim = input_dim, hidden_dim

    @staticmethod
    def sequence_lengths(lengths):
        return lengths

    def forward(self, spec, lengths=None):
        """``spec``: (B, T, F) right-padded; returns ``(sequence (B, T, H), pooled (B, H))``.

        Padding never leaks into valid steps because the recurrence runs left
        to right.
        """
        if spec.shape[1] == 0:
            raise DataError("spectrogram has no frames")
        if spec.shape[-1] != self.input_dim:
            raise DataError(f"spectrogram has {spec.shape[-1]} bins, encoder expects {self.input_dim}")
        B, T, _ = spec.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        h = spec
        for layer in self.layers:
            h = layer(h)
        if self.pooling == "last":
            pooled = h[torch.arange(B), lengths - 1]
        else:
            mask = _lengths_mask(lengths, T, h.device).to(h.dtype)
            pooled = (h * mask[..., None]).sum(1) / lengths[:, None].to(h.dtype)
        return h, pooled


class CNNAudioEncoder(nn.Module):
    """Ablation encoder: three 1-D convolutions over time, masked global average pool.

    conv k3 s1 p1 -> ReLU -> conv k3 s2 p1 -> ReLU -> conv k1 -> mean over valid steps.
    """

    def __init__(self, input_dim: int, out_dim: int = 512, channels: int = 256):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, out_dim
        self.conv1 = nn.Conv1d(input_dim, channels, 3, 1, 1)
        self.conv2 = nn.Conv1d(channels, channels, 3, 2, 1)
        self.conv3 = nn.Conv1d(channels, out_dim, 1)
        self.act1, self.act2 = nn.ReLU(), nn.ReLU()

    @staticmethod
    def sequence_lengths(lengths):
        return (lengths - 1) // 2 + 1

    def feature_map(self, spec, lengths=None):
        """Pre-pooling map ``(B, out_dim, T')`` and its valid lengths."""
        if spec.shape[1] == 0:
            raise DataError("spectrogram has no frames")
        if spec.shape[-1] != self.input_dim:
            raise DataError(f"spectrogram has {spec.shape[-1]} bins, encoder expects {self.input_dim}")
        B, T, _ = spec.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        mask = _lengths_mask(lengths, T, spec.device)[:, None].to(spec.dtype)
        # zero the padded tail before and after every layer so batched and single runs agree
        x = spec.transpose(1, 2) * mask
        x = self.act1(self.conv1(x)) * mask
        lengths2 = self.sequence_lengths(lengths)
        x = self.conv2(x)
        x = self.act2(x) * _lengths_mask(lengths2, x.shape[-1], x.device)[:, None].to(x.dtype)
        x = self.conv3(x) * _lengths_mask(lengths2, x.shape[-1], x.device)[:, None].to(x.dtype)
        return x, lengths2

    def forward(self, spec, lengths=None):
        fmap, lengths2 = self.feature_map(spec, lengths)
        pooled = fmap.sum(-1) / lengths2[:, None].to(fmap.dtype)
        return fmap.transpose(1, 2), pooled
