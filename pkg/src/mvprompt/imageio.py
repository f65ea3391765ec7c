"""PNG image I/O. Images are float64 arrays of shape (H, W, 3) in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .errors import ShapeError


def load_image(path) -> np.ndarray:
    img = Image.open(Path(path)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path, metadata: dict[str, str] | None = None) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    info = PngInfo()
    for key, value in (metadata or {}).items():
        info.add_text(key, value)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG", pnginfo=info)


def read_metadata(path) -> dict[str, str]:
    with Image.open(Path(path)) as img:
        return dict(img.text) if hasattr(img, "text") else {}


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Resize to size x size (bilinear). Identity when already that size."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    resized = Image.fromarray(data, mode="RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def image_grid(images: list[np.ndarray], cols: int = 2) -> np.ndarray:
    """Tile same-shaped images row-major into one image."""
    if not images:
        raise ShapeError("no images to tile")
    h, w, _ = images[0].shape
    rows = (len(images) + cols - 1) // cols
    grid = np.ones((rows * h, cols * w, 3), dtype=np.float64)
    for i, img in enumerate(images):
        if img.shape != images[0].shape:
            raise ShapeError("grid images must share one shape")
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    return grid
