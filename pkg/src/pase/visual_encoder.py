"""Lip-window encoder: 14-layer convolutional stack from 15x96x96 down to a 512x1x1 embedding."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from pase.errors import DataError

INPUT_CHANNELS = 15
INPUT_SIZE = 96


@dataclass(frozen=True)
class ConvLayerSpec:
    kind: str  # "conv" or "residual_block"
    in_ch: int
    out_ch: int
    kernel: tuple
    stride: tuple
    padding: tuple

    def __post_init__(self):
        if self.kind not in ("conv", "residual_block"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "residual_block" and (self.in_ch != self.out_ch or tuple(self.stride) != (1, 1)):
            raise ValueError("residual blocks need in_ch == out_ch and unit stride")


def _conv(i, o, k, s, p):
    return ConvLayerSpec("conv", i, o, (k, k), s if isinstance(s, tuple) else (s, s), (p, p))


def _res(c):
    return ConvLayerSpec("residual_block", c, c, (3, 3), (1, 1), (1, 1))


VISUAL_STACK = (
    _conv(15, 32, 7, 1, 3),
    _conv(32, 64, 5, (1, 2), 1),
    _res(64),
    _res(64),
    _conv(64, 128, 3, 2, 1),
    _res(128),
    _res(128),
    _conv(128, 256, 3, 2, 1),
    _res(256),
    _conv(256, 512, 3, 2, 1),
    _res(512),
    _conv(512, 512, 3, 2, 1),
    _conv(512, 512, 3, (4, 1), 0),
    _conv(512, 512, 1, 1, 0),
)


def conv_output_shape(spec: ConvLayerSpec, in_shape) -> tuple[int, int]:
    h, w = in_shape
    if h <= 0 or w <= 0:
        raise DataError("input shape must be positive")
    out = tuple(
        (n + 2 * p - k) // s + 1 for n, k, s, p in zip((h, w), spec.kernel, spec.stride, spec.padding)
    )
    if min(out) <= 0 or any(n + 2 * p < k for n, k, p in zip((h, w), spec.kernel, spec.padding)):
        raise DataError(f"input too small for layer: {in_shape} through {spec}")
    return out


def shape_chain(in_shape=(INPUT_SIZE, INPUT_SIZE), stack=VISUAL_STACK) -> list[tuple[int, int]]:
    """Spatial shape before the first layer and after every layer."""
    shapes = [tuple(in_shape)]
    for spec in stack:
        shapes.append(conv_output_shape(spec, shapes[-1]))
    return shapes


def scaled_stack(embed_dim: int, stack=VISUAL_STACK) -> tuple:
    """Same kernels/strides with every width (except the 15 input channels) scaled by ``embed_dim / 512``."""
    if 512 % embed_dim:
        raise ValueError("embed_dim must divide 512")
    div = 512 // embed_dim

    def w(c):
        return c if c == INPUT_CHANNELS else max(1, c // div)

    return tuple(ConvLayerSpec(s.kind, w(s.in_ch), w(s.out_ch), s.kernel, s.stride, s.padding) for s in stack)


class ConvReLU(nn.Module):
    def __init__(self, spec: ConvLayerSpec, batch_norm=False):
        super().__init__()
        self.conv = nn.Conv2d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, spec.padding)
        self.norm = nn.BatchNorm2d(spec.out_ch) if batch_norm else nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """``relu(x + conv2(relu(conv1(x))))``."""

    def __init__(self, spec: ConvLayerSpec, batch_norm=False):
        super().__init__()
        c = spec.in_ch
        self.conv1 = nn.Conv2d(c, c, spec.kernel, 1, spec.padding)
        self.conv2 = nn.Conv2d(c, c, spec.kernel, 1, spec.padding)
        self.norm1 = nn.BatchNorm2d(c) if batch_norm else nn.Identity()
        self.norm2 = nn.BatchNorm2d(c) if batch_norm else nn.Identity()
        self.act1, self.act2 = nn.ReLU(), nn.ReLU()

    def forward(self, x):
        return self.act2(x + self.norm2(self.conv2(self.act1(self.norm1(self.conv1(x))))))


class VisualEncoder(nn.Module):
    def __init__(self, stack=VISUAL_STACK, input_size: int = INPUT_SIZE, batch_norm: bool = False):
        super().__init__()
        final = shape_chain((input_size, input_size), stack)[-1]
        if final != (1, 1):
            raise ValueError(f"stack maps {input_size}x{input_size} to {final}, not 1x1")
        self.stack = tuple(stack)
        self.input_size = input_size
        self.embed_dim = stack[-1].out_ch
        self.layers = nn.Sequential(
            *[ResidualBlock(s, batch_norm) if s.kind == "residual_block" else ConvReLU(s, batch_norm) for s in stack]
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                # He init keeps activations alive through 14 ReLU layers
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # NHWC is markedly faster for these convolutions on CPU
        self.to(memory_format=torch.channels_last)

    def forward(self, windows):
        """``windows``: (N, 15, H, W) -> (N, embed_dim)."""
        if windows.ndim != 4 or windows.shape[1] != self.stack[0].in_ch:
            raise DataError(f"expected (N, {self.stack[0].in_ch}, H, W) windows, got {tuple(windows.shape)}")
        if windows.shape[-2:] != (self.input_size, self.input_size):
            raise DataError(f"expected {self.input_size}x{self.input_size} crops, got {tuple(windows.shape[-2:])}")
        return self.layers(windows.contiguous(memory_format=torch.channels_last)).flatten(1)

    def encode_window(self, window):
        """Single ``(15, H, W)`` window -> ``(embed_dim,)``."""
        return self(window[None])[0]

    def encode_frame_sequence(self, windows):
        """``(T_v, 15, H, W)`` windows of one segment -> ``(T_v, embed_dim)``."""
        if len(windows) == 0:
            raise DataError("empty window sequence")
        return self(windows)
