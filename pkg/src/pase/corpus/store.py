"""In-memory clip collection and its on-disk manifest layout.

Layout::

    root/corpus.json              format tag, rates, inventory, clip ids
    root/<clip_id>/audio.wav      16-bit mono PCM
    root/<clip_id>/frames/NNNNN.png
    root/<clip_id>/alignment.tsv
    root/<clip_id>/landmarks.txt  68 "x y" lines per frame
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from pase.corpus.alignment import parse_alignment, write_alignment
from pase.corpus.inventory import PhonemeInventory, arpabet_inventory
from pase.corpus.lips import read_landmarks, write_landmarks
from pase.errors import DataError
from pase.frontend import read_wav, write_wav

FORMAT = "pase-corpus"
VERSION = 1


@dataclass
class Clip:
    clip_id: str
    audio: np.ndarray  # float64 samples in [-1, 1)
    frames: np.ndarray  # (N, H, W, 3) uint8 RGB
    landmarks: np.ndarray  # (N, 68, 2)
    intervals: list

    def __eq__(self, other):
        if not isinstance(other, Clip):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.landmarks, other.landmarks)
            and self.intervals == other.intervals
        )


@dataclass
class Corpus:
    inventory: PhonemeInventory
    clips: list
    sample_rate: int = 16000
    fps: int = 25

    def __len__(self):
        return len(self.clips)

    def split(self, holdout_fraction: float) -> tuple["Corpus", "Corpus"]:
        """Split by clip: the last ``holdout_fraction`` of clips is held out."""
        n_hold = max(1, round(len(self.clips) * holdout_fraction))
        if n_hold >= len(self.clips):
            raise DataError("corpus too small to hold out clips")
        head, tail = self.clips[:-n_hold], self.clips[-n_hold:]
        return (Corpus(self.inventory, head, self.sample_rate, self.fps),
                Corpus(self.inventory, tail, self.sample_rate, self.fps))


def save_corpus(corpus: Corpus, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "sample_rate": corpus.sample_rate,
        "fps": corpus.fps,
        "inventory": corpus.inventory.to_dict(),
        "clips": [c.clip_id for c in corpus.clips],
    }
    for clip in corpus.clips:
        d = root / clip.clip_id
        (d / "frames").mkdir(parents=True, exist_ok=True)
        write_wav(d / "audio.wav", clip.audio, corpus.sample_rate)
        for i, frame in enumerate(clip.frames):
            if not cv2.imwrite(str(d / "frames" / f"{i:05d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)):
                raise OSError(f"could not write frame {i} of {clip.clip_id}")
        write_alignment(d / "alignment.tsv", clip.intervals)
        write_landmarks(d / "landmarks.txt", clip.landmarks)
    (root / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def _load_clip(d: Path, inventory, sample_rate) -> Clip:
    audio, rate = read_wav(d / "audio.wav")
    if rate != sample_rate:
        raise DataError(f"{d}: sample rate {rate} != corpus rate {sample_rate}")
    frame_paths = sorted((d / "frames").glob("*.png"))
    if not frame_paths:
        raise DataError(f"{d}: no frames")
    frames = []
    for p in frame_paths:
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"{p}: unreadable image")
        frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    landmarks = read_landmarks(d / "landmarks.txt")
    if len(landmarks) != len(frames):
        raise DataError(f"{d}: {len(landmarks)} landmark sets for {len(frames)} frames")
    intervals = parse_alignment(d / "alignment.tsv", inventory)
    return Clip(d.name, audio, np.stack(frames), landmarks, intervals)


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest_path = root / "corpus.json"
    if not manifest_path.exists():
        raise DataError(f"{root}: missing corpus.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise DataError(f"{manifest_path}: unsupported corpus format")
    inventory = (PhonemeInventory.from_dict(manifest["inventory"]) if "inventory" in manifest
                 else arpabet_inventory())
    sample_rate = int(manifest.get("sample_rate", 16000))
    clips = [_load_clip(root / cid, inventory, sample_rate) for cid in manifest["clips"]]
    return Corpus(inventory, clips, sample_rate, int(manifest.get("fps", 25)))
