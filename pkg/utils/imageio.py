# utils/imageio.py
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from utils.image_core import ImageTensor, check_image


def to_uint8(image: ImageTensor) -> np.ndarray:
    """[-1, 1] -> [0, 255] by round((v + 1) * 127.5)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((arr + 1.0) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> ImageTensor:
    arr = np.asarray(pixels, dtype=np.float32)
    return arr / 127.5 - 1.0


def save_png(image: ImageTensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(check_image(image))).save(path, format="PNG", optimize=False)
    return path


def load_png(path: str | Path) -> ImageTensor:
    """Read an 8-bit RGB PNG into an ImageTensor.

    Raises OSError for missing or undecodable files.
    """
    with Image.open(path) as im:
        im.load()
        rgb = im.convert("RGB")
    return from_uint8(np.asarray(rgb))
