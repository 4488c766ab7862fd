"""Mask network: one attribution map per class at input resolution.

Outputs are squashed into (0, 1) by a sigmoid; channel c is the
attribution for class c and nothing else, with no normalization across
classes. Two presets: a desk-scale encoder-decoder trained from scratch,
and a DeepLabV3/ResNet-50 head (also from scratch, never from pretrained
segmentation weights) for real-data runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

PRESETS = ("small", "deeplabv3")


@dataclass(frozen=True)
class ExplainerConfig:
    class_count: int
    preset: str = "small"
    input_size: int = 64
    base_width: int = 16
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; options: {PRESETS}")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.input_size % 8 != 0:
            raise ValueError("input_size must be divisible by 8 (three downsampling stages)")


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class _EncoderDecoder(nn.Module):
    """Encoder-decoder with skip connections; three downsampling stages."""

    def __init__(self, class_count: int, width: int):
        super().__init__()
        w = width
        self.enc1 = _double_conv(3, w)
        self.enc2 = _double_conv(w, 2 * w)
        self.enc3 = _double_conv(2 * w, 4 * w)
        self.mid = _double_conv(4 * w, 8 * w)
        self.dec3 = _double_conv(8 * w + 4 * w, 4 * w)
        self.dec2 = _double_conv(4 * w + 2 * w, 2 * w)
        self.dec1 = _double_conv(2 * w + w, w)
        self.head = nn.Conv2d(w, class_count, 1)

    @staticmethod
    def _up(x: Tensor) -> Tensor:
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x: Tensor) -> Tensor:
        a = self.enc1(x)
        b = self.enc2(F.max_pool2d(a, 2))
        c = self.enc3(F.max_pool2d(b, 2))
        m = self.mid(F.max_pool2d(c, 2))
        u = self.dec3(torch.cat([self._up(m), c], dim=1))
        u = self.dec2(torch.cat([self._up(u), b], dim=1))
        u = self.dec1(torch.cat([self._up(u), a], dim=1))
        return self.head(u)


class _DeepLabHead(nn.Module):
    def __init__(self, class_count: int):
        super().__init__()
        from torchvision.models.segmentation import deeplabv3_resnet50

        self.net = deeplabv3_resnet50(weights=None, weights_backbone=None, num_classes=class_count)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)["out"]


class MaskExplainer(nn.Module):
    """Wrapper around a preset backbone; maps raw [0, 1] images to per-class
    masks of the same resolution."""

    def __init__(self, cfg: ExplainerConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.preset == "small":
            self.net = _EncoderDecoder(cfg.class_count, cfg.base_width)
        else:
            self.net = _DeepLabHead(cfg.class_count)
        self.register_buffer("_mean", torch.tensor(cfg.mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(cfg.std).view(1, 3, 1, 1))

    @property
    def head(self) -> nn.Module:
        """Final per-class projection layer (useful for inspection)."""
        return self.net.head if self.cfg.preset == "small" else self.net.net.classifier[-1]

    def forward(self, images: Tensor) -> Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        if images.shape[-2] != self.cfg.input_size or images.shape[-1] != self.cfg.input_size:
            raise ValueError(
                f"expected spatial size {self.cfg.input_size}, got {tuple(images.shape[-2:])}"
            )
        x = (images - self._mean) / self._std
        logits = self.net(x)
        if logits.shape[-2:] != images.shape[-2:]:
            logits = F.interpolate(logits, size=images.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)

    @torch.no_grad()
    def class_masks(self, image: Tensor) -> Tensor:
        """Evaluation-mode masks [C, H, W] for a single raw [3, H, W] image."""
        was_training = self.training
        self.eval()
        out = self(image.unsqueeze(0))[0]
        if was_training:
            self.train()
        return out


def build_explainer(cfg: ExplainerConfig, seed: int | None = None) -> MaskExplainer:
    """Randomly initialized network; no pretrained weights are ever loaded.

    With a fixed seed two builds produce identical initial parameters.
    """
    if seed is not None:
        torch.manual_seed(seed)
    return MaskExplainer(cfg)
