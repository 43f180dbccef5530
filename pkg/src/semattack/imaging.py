"""Image conversions and PNG I/O.

Public APIs take HWC float arrays in [0, 1]; models consume NCHW tensors.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError


def to_tensor(images) -> torch.Tensor:
    """HWC or NHWC array -> NCHW float32 tensor."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(images: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> NHWC float32 array."""
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def save_png(image, path):
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(arr * 255).astype(np.uint8)).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_grid(images, path, columns=8, scale=4):
    images = np.asarray(images, dtype=np.float32)
    n, h, w, _ = images.shape
    rows = -(-n // columns)
    canvas = np.ones((rows * h, columns * w, 3), dtype=np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    pil = Image.fromarray(np.rint(np.clip(canvas, 0, 1) * 255).astype(np.uint8))
    pil = pil.resize((pil.width * scale, pil.height * scale), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
