"""Mask serialization and overlay rendering.

Masks serialize as 8-bit grayscale PNGs (pixel = round(255 * value)); the
round trip is lossy and meant for visualization only, never for metric
computation. Overlays blend a blue-to-red heat color over the image:

    heat(v)    = (v, 0, 1 - v)                      per channel, v in [0, 1]
    overlay    = (1 - alpha) * image + alpha * v * heat(v),  alpha = 0.5

so pixels where the mask is zero show the original image dimmed by
(1 - alpha) and fully attributed pixels glow red.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

OVERLAY_ALPHA = 0.5


def mask_to_png(mask: Tensor, path: str | Path) -> None:
    """Write a [H, W] mask in [0, 1] as 8-bit grayscale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(mask.detach().cpu().numpy() * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def mask_from_png(path: str | Path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def heat_color(mask: Tensor) -> Tensor:
    """Blue-to-red colormap: [H, W] mask to [3, H, W] colors."""
    zeros = torch.zeros_like(mask)
    return torch.stack([mask, zeros, 1.0 - mask])


def overlay(image: Tensor, mask: Tensor, alpha: float = OVERLAY_ALPHA) -> Tensor:
    """Blend the mask's heat color over a raw [3, H, W] image.

    out = (1 - alpha) * image + alpha * mask * heat_color(mask)
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError("image and mask spatial sizes must match")
    return (1.0 - alpha) * image + alpha * mask.unsqueeze(0) * heat_color(mask)


def image_to_png(image: Tensor, path: str | Path) -> None:
    """Write a raw [3, H, W] image in [0, 1] as 8-bit RGB."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(image.detach().cpu().numpy() * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
