"""Lip-region cropping from 68-point landmarks and 5-frame window stacking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from pase.errors import DataError

LIP_POINTS = slice(48, 68)
N_LANDMARKS = 68
CROP_SIZE = 96
WINDOW = 5
MARGIN = 0.2  # total expansion; half on each side


@dataclass
class LipWindow:
    pixels: np.ndarray  # (15, H, W) float32 in [0, 1]
    center_frame: int


def lip_box(landmarks, image_shape, margin: float = MARGIN) -> tuple[int, int, int, int]:
    """Pixel box ``(x0, y0, x1, y1)``, end-exclusive, around landmarks 48-67."""
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise DataError(f"expected {N_LANDMARKS} 2-D landmarks, got shape {pts.shape}")
    lips = pts[LIP_POINTS]
    (x0, y0), (x1, y1) = lips.min(axis=0), lips.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise DataError("degenerate landmarks")
    dx, dy = w * margin / 2, h * margin / 2
    height, width = image_shape[:2]
    bx0 = max(0, math.floor(x0 - dx + 1e-9))
    by0 = max(0, math.floor(y0 - dy + 1e-9))
    bx1 = min(width, math.ceil(x1 + dx - 1e-9))
    by1 = min(height, math.ceil(y1 + dy - 1e-9))
    if bx1 <= bx0 or by1 <= by0:
        raise DataError("degenerate landmarks")
    return bx0, by0, bx1, by1


def crop_lips(frame_image, landmarks, size: int = CROP_SIZE) -> np.ndarray:
    """Crop the margin-expanded lip box and resize it to ``size x size``."""
    image = np.asarray(frame_image)
    x0, y0, x1, y1 = lip_box(landmarks, image.shape)
    crop = np.ascontiguousarray(image[y0:y1, x0:x1])
    return cv2.resize(crop, (size, size), interpolation=cv2.INTER_AREA)


def _as_unit(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return frame.astype(np.float32)


def window_indices(center: int, n_frames: int, window: int = WINDOW) -> np.ndarray:
    half = window // 2
    return np.clip(np.arange(center - half, center + half + 1), 0, n_frames - 1)


def build_window(frames, center: int, window: int = WINDOW) -> LipWindow:
    """Stack frames ``center-2 .. center+2`` channel-wise (frame-major RGB).

    Positions outside the clip repeat the nearest edge frame.
    """
    if len(frames) == 0:
        raise DataError("empty clip")
    if not 0 <= center < len(frames):
        raise DataError(f"center frame {center} outside clip of {len(frames)} frames")
    stack = [_as_unit(frames[i]) for i in window_indices(center, len(frames), window)]
    pixels = np.concatenate([f.transpose(2, 0, 1) for f in stack], axis=0)
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DataError("lip crop values must lie in [0, 1]")
    return LipWindow(pixels, center)


def read_landmarks(path) -> np.ndarray:
    """Landmark file: 68 ``x y`` lines per frame; returns ``(n_frames, 68, 2)``."""
    rows = []
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split()
        try:
            if len(parts) != 2:
                raise ValueError
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise DataError(f"{path}:{line_no}: expected 'x y'") from None
    if len(rows) % N_LANDMARKS:
        raise DataError(f"{path}: {len(rows)} points is not a multiple of {N_LANDMARKS}")
    return np.array(rows, dtype=np.float64).reshape(-1, N_LANDMARKS, 2)


def write_landmarks(path, landmarks) -> None:
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    Path(path).write_text("".join(f"{x!r} {y!r}\n" for x, y in pts.tolist()), encoding="utf-8")
