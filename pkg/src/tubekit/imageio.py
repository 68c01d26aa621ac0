"""8-bit grayscale mask and image files (PNG or PGM via Pillow)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

MASK_SUFFIXES = (".png", ".pgm")


def read_mask(path) -> np.ndarray:
    """Any value >= 128 is foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_gray(path) -> np.ndarray:
    """Grayscale image scaled to [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_gray(path, img) -> None:
    arr = np.clip(np.rint(np.asarray(img, float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_rgb(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def list_masks(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in MASK_SUFFIXES and p.is_file())
