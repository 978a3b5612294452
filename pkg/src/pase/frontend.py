"""STFT and Mel spectrogram front-end.

Framing never centre-pads: a signal of ``N >= win_length`` samples yields
``(N - win_length) // hop_length + 1`` frames, so phoneme segment bookkeeping
stays exact. Shorter signals are right-padded with zeros to one window.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass

import numpy as np

from pase.errors import DataError

SCALES = ("log_magnitude", "magnitude")
VARIANTS = ("stft", "mel")


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    n_fft: int = 512
    win_length: int = 512
    hop_length: int = 128
    window_fn: str = "hann"
    scale: str = "log_magnitude"
    variant: str = "stft"
    n_mels: int = 80

    def __post_init__(self):
        for name in ("sample_rate_hz", "n_fft", "win_length", "hop_length", "n_mels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")
        if self.hop_length > self.win_length:
            raise ValueError("hop_length must not exceed win_length")
        if self.window_fn != "hann":
            raise ValueError(f"unsupported window {self.window_fn!r}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "mel" and self.n_mels >= self.n_fft // 2 + 1:
            raise ValueError("n_mels must be smaller than the number of STFT bins")

    @property
    def n_bins(self) -> int:
        """Width of the produced spectrogram."""
        return self.n_mels if self.variant == "mel" else self.n_fft // 2 + 1

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop_length


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, F)
    frame_rate_hz: float
    variant: str

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def n_frames(n_samples: int, config: FrontendConfig) -> int:
    """Frame count for a signal of ``n_samples`` after short-signal padding."""
    n = max(n_samples, config.win_length)
    return (n - config.win_length) // config.hop_length + 1


def hann_window(length: int) -> np.ndarray:
    # periodic form, the usual choice for spectral analysis
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def _check_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("audio must be a mono 1-D signal")
    if x.size == 0:
        raise DataError("empty audio")
    if not np.all(np.isfinite(x)):
        raise DataError("invalid samples")
    return x


def _magnitude(x: np.ndarray, config: FrontendConfig) -> np.ndarray:
    if x.size < config.win_length:
        x = np.pad(x, (0, config.win_length - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, config.win_length)[:: config.hop_length]
    frames = frames * hann_window(config.win_length)
    return np.abs(np.fft.rfft(frames, n=config.n_fft, axis=-1))


def _scaled(mag: np.ndarray, config: FrontendConfig) -> np.ndarray:
    if config.scale == "log_magnitude":
        return np.log1p(mag)
    return mag


def stft_spectrogram(samples, config: FrontendConfig | None = None) -> Spectrogram:
    """Linear-frequency magnitude spectrogram, shape ``(T, n_fft // 2 + 1)``."""
    config = config or FrontendConfig()
    x = _check_samples(samples)
    values = _scaled(_magnitude(x, config), config)
    return Spectrogram(values, config.frame_rate_hz, "stft")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def _filterbank(sample_rate_hz: int, n_fft: int, n_mels: int) -> np.ndarray:
    fft_freqs = np.linspace(0.0, sample_rate_hz / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape ``(n_mels, n_fft // 2 + 1)``, read-only."""
    return _filterbank(config.sample_rate_hz, config.n_fft, config.n_mels)


def mel_spectrogram(samples, config: FrontendConfig | None = None) -> Spectrogram:
    config = config or FrontendConfig(variant="mel")
    x = _check_samples(samples)
    mel = _magnitude(x, config) @ mel_filterbank(config).T
    return Spectrogram(_scaled(mel, config), config.frame_rate_hz, "mel")


def spectrogram(samples, config: FrontendConfig) -> Spectrogram:
    """Dispatch on ``config.variant``."""
    if config.variant == "mel":
        return mel_spectrogram(samples, config)
    return stft_spectrogram(samples, config)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; returns samples scaled to [-1, 1) and the rate."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def quantize_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate_hz: int) -> None:
    pcm = quantize_pcm16(samples)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate_hz)
        fh.writeframes(pcm.tobytes())
