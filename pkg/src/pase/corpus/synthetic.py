"""Synthetic phoneme/viseme corpus for desk-scale training and tests.

Each phoneme gets an acoustic signature (two tones at phoneme-specific STFT
bin centres plus noise). Each *viseme class* gets a mouth shape (opening
height and lip width) drawn as filled ellipses on a flat face. Phonemes that
share a class therefore look alike but sound different, which is the
ambiguity structure the encoder has to learn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from pase.corpus.alignment import PhonemeInterval
from pase.corpus.inventory import PhonemeInventory, desk_inventory
from pase.corpus.store import Clip, Corpus
from pase.errors import DataError
from pase.frontend import quantize_pcm16

SKIN = np.array([200.0, 160.0, 140.0])
LIP = np.array([170.0, 60.0, 70.0])
MOUTH = np.array([40.0, 10.0, 20.0])
_SUB = 4  # cv2 fractional-coordinate bits


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 16000
    fps: int = 25
    n_fft: int = 512
    image_size: int = 128
    phonemes_per_clip: tuple = (4, 8)
    duration_s: tuple = (0.04, 0.08)
    lead_silence_s: float = 0.04
    tone_amplitude: float = 0.25
    amplitude_jitter: float = 0.2
    noise_std: float = 0.01
    base_aperture: float = 3.0
    class_gap: float = 6.0
    aperture_levels: int = 4
    base_width: float = 24.0
    width_gap: float = 5.0
    lip_thickness: float = 5.0
    geometry_jitter: float = 0.5
    pixel_jitter: float = 0.03
    landmark_jitter: float = 0.3


def signature_bins(phoneme_id: int) -> tuple[int, int]:
    """STFT bins carrying phoneme ``phoneme_id``'s tones; disjoint across phonemes."""
    return 4 + 6 * phoneme_id, 7 + 6 * phoneme_id


def viseme_rank(inventory: PhonemeInventory) -> dict:
    """Viseme class id -> dense rank in order of first appearance."""
    ranks = {}
    for p in inventory.labels:
        ranks.setdefault(inventory.viseme_class[p], len(ranks))
    return ranks


def viseme_parameters(inventory: PhonemeInventory, config: SynthConfig = SynthConfig()) -> dict:
    """Viseme class id -> ``(aperture, half_width)`` in pixels."""
    params = {}
    for cls, k in viseme_rank(inventory).items():
        aperture = config.base_aperture + (k % config.aperture_levels) * config.class_gap
        width = config.base_width + (k // config.aperture_levels) * config.width_gap
        params[cls] = (aperture, width)
    return params


REST = (0.0, 24.0)  # closed mouth during silence


def _template_face(size):
    """Fixed positions for landmarks 0-47 (jaw, brows, nose, eyes)."""
    s = size / 128.0
    jaw = [(20 + 88 * i / 16, 70 + 45 * math.sin(math.pi * i / 16)) for i in range(17)]
    brows = [(30 + 7 * i, 38 - 3 * math.sin(math.pi * i / 4)) for i in range(5)]
    brows += [(70 + 7 * i, 38 - 3 * math.sin(math.pi * i / 4)) for i in range(5)]
    nose = [(64, 45 + 6 * i) for i in range(4)] + [(56 + 4 * i, 66) for i in range(5)]
    eyes = []
    for cx in (44, 84):
        eyes += [(cx + 8 * math.cos(a), 50 + 3 * math.sin(a)) for a in np.linspace(math.pi, -math.pi, 6, endpoint=False)]
    pts = np.array(jaw + brows + nose + eyes, dtype=np.float64) * s
    assert pts.shape == (48, 2)
    return pts


def render_mouth(aperture, half_width, center, config: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """One RGB frame plus its 68 landmarks for the given mouth geometry."""
    size = config.image_size
    cx, cy = center
    outer_h = aperture / 2 + config.lip_thickness
    inner_w = 0.75 * half_width
    scale = 1 << _SUB

    def fx(v):
        return int(round(v * scale))

    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = SKIN
    cv2.ellipse(img, (fx(cx), fx(cy)), (fx(half_width), fx(outer_h)), 0, 0, 360, LIP.tolist(), -1,
                cv2.LINE_AA, _SUB)
    if aperture > 0:
        cv2.ellipse(img, (fx(cx), fx(cy)), (fx(inner_w), fx(aperture / 2)), 0, 0, 360, MOUTH.tolist(), -1,
                    cv2.LINE_AA, _SUB)
    noise = rng.uniform(-config.pixel_jitter, config.pixel_jitter, img.shape) * 255.0
    frame = np.clip(np.round(img + noise), 0, 255).astype(np.uint8)

    outer = [(cx + half_width * math.cos(a), cy + outer_h * math.sin(a))
             for a in np.linspace(math.pi, -math.pi, 12, endpoint=False)]
    inner = [(cx + inner_w * math.cos(a), cy + aperture / 2 * math.sin(a))
             for a in np.linspace(math.pi, -math.pi, 8, endpoint=False)]
    lips = np.array(outer + inner)
    face = _template_face(size)
    landmarks = np.concatenate([face, lips]) + rng.uniform(-config.landmark_jitter, config.landmark_jitter, (68, 2))
    return frame, landmarks


def synth_tone_segment(phoneme_id, n_samples, config: SynthConfig, rng) -> np.ndarray:
    t = np.arange(n_samples) / config.sample_rate
    x = np.zeros(n_samples)
    for b in signature_bins(phoneme_id):
        freq = b * config.sample_rate / config.n_fft
        amp = config.tone_amplitude * (1 + rng.uniform(-config.amplitude_jitter, config.amplitude_jitter))
        x += amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return x


def _make_clip(clip_id, inventory, config, rng) -> Clip:
    visemes = viseme_parameters(inventory, config)
    sr, fps = config.sample_rate, config.fps
    n_ph = int(rng.integers(config.phonemes_per_clip[0], config.phonemes_per_clip[1] + 1))
    lo_cs, hi_cs = (round(d * 100) for d in config.duration_s)
    t = config.lead_silence_s
    intervals = []
    for _ in range(n_ph):
        label = inventory.labels[int(rng.integers(len(inventory)))]
        dur = int(rng.integers(lo_cs, hi_cs + 1)) / 100.0
        start, end = round(t, 6), round(t + dur, 6)
        intervals.append(PhonemeInterval(label, start, end))
        t = end
    total_s = t + config.lead_silence_s
    n_samples = round(total_s * sr)

    audio = rng.normal(0.0, config.noise_std, n_samples)
    for iv in intervals:
        lo, hi = round(iv.start_s * sr), round(iv.end_s * sr)
        audio[lo:hi] += synth_tone_segment(inventory.index(iv.phoneme), hi - lo, config, rng)
    audio = quantize_pcm16(audio).astype(np.float64) / 32768.0

    n_frames = math.ceil(total_s * fps - 1e-9)
    frames, landmarks = [], []
    g = config.geometry_jitter
    for f in range(n_frames):
        time = f / fps
        shape = REST
        for iv in intervals:
            if iv.start_s <= time + 1e-9 < iv.end_s:
                shape = visemes[inventory.viseme_class[iv.phoneme]]
                break
        aperture, width = shape
        if aperture > 0:
            aperture = max(0.5, aperture + rng.uniform(-g, g))
        width += rng.uniform(-g, g)
        center = (config.image_size / 2 + rng.uniform(-g, g), config.image_size * 0.625 + rng.uniform(-g, g))
        frame, pts = render_mouth(aperture, width, center, config, rng)
        frames.append(frame)
        landmarks.append(pts)
    return Clip(clip_id, audio, np.stack(frames), np.stack(landmarks), intervals)


def generate_synthetic_corpus(n_clips: int, inventory: PhonemeInventory | None = None, rng_seed: int = 0,
                              config: SynthConfig = SynthConfig()) -> Corpus:
    """Deterministic in ``rng_seed``; clip ``i`` does not depend on ``n_clips``."""
    inventory = inventory or desk_inventory()
    if inventory.n_visemes < 2:
        raise DataError("synthetic inventory needs at least two viseme classes")
    if inventory.n_visemes == len(inventory):
        raise DataError("synthetic inventory needs at least one viseme-sharing pair")
    if max(signature_bins(len(inventory) - 1)) >= config.n_fft // 2:
        raise DataError("inventory too large for disjoint tone signatures")
    streams = np.random.SeedSequence(rng_seed).spawn(n_clips)
    clips = [_make_clip(f"clip{i:04d}", inventory, config, np.random.default_rng(s)) for i, s in enumerate(streams)]
    return Corpus(inventory, clips, config.sample_rate, config.fps)
