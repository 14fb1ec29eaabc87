"""8-bit PNG I/O in the package's CHW float layout."""

from pathlib import Path

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    """Read an RGB image as a float64 3 x H x W array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write a C x H x W (C = 1 or 3) array in [0, 1] as an 8-bit PNG."""
    arr = to_uint8(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path, optimize=False)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, optimize=False)
