"""Stereo image pairs and PNG/tensor conversions.

Images are numpy float32 arrays of shape (H, W, 3) with values in [0, 1];
networks see torch tensors of shape (3, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

# ITU-R BT.601 luminance weights.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class ImageError(ValueError):
    """Shape or range violations on image data."""


def _check_image(img: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"{name} must be (H, W, 3), got {arr.shape}")
    return arr.astype(np.float32, copy=False)


@dataclass
class StereoImagePair:
    """Left/right RGB images of equal shape, values clamped to [0, 1]."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self) -> None:
        self.left = _check_image(self.left, "left")
        self.right = _check_image(self.right, "right")
        if self.left.shape != self.right.shape:
            raise ImageError(
                f"view shape mismatch: {self.left.shape} vs {self.right.shape}"
            )
        self.left = np.clip(self.left, 0.0, 1.0)
        self.right = np.clip(self.right, 0.0, 1.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.left.shape

    def swap(self) -> "StereoImagePair":
        return StereoImagePair(self.right.copy(), self.left.copy())


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma channel of an (H, W, 3) image, float64."""
    return np.asarray(img, dtype=np.float64) @ _LUMA


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) numpy image to (3, H, W) torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).to(dtype)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) torch tensor to clamped (H, W, 3) float32 image."""
    arr = t.detach().to(torch.float32).permute(1, 2, 0).cpu().numpy()
    return np.clip(arr, 0.0, 1.0)


def pair_to_tensors(
    pair: StereoImagePair, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    return to_tensor(pair.left, dtype), to_tensor(pair.right, dtype)


def save_png(img: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(str(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(str(path)) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float32)
    return data / 255.0
