"""Reference attribution methods: gradient-weighted activation maps,
randomized input sampling, and the constant masks bounding metric tables.

Heatmaps are [H, W] tensors min-max normalized to [0, 1] per image
(constant maps are returned unchanged). Both methods are deterministic
under a fixed seed and operate on a frozen classifier.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .classifier import Explanandum


def normalize_heatmap(values: Tensor) -> Tensor:
    """Min-max rescale to [0, 1]; a constant map is returned as-is."""
    lo, hi = values.min(), values.max()
    if hi == lo:
        return values.clone()
    return (values - lo) / (hi - lo)


def grad_cam(classifier: Explanandum, image: Tensor, class_idx: int) -> Tensor:
    """Gradient-weighted activation map for one class.

    Channel weights are the spatial averages of the class logit's gradients
    at the classifier's declared last convolutional feature map; the
    rectified weighted sum is upsampled bilinearly to input size and
    min-max normalized. A logit with no dependence on the input yields a
    constant (all-zero) map.
    """
    layer = classifier.gradcam_module()
    captured: dict[str, Tensor] = {}

    def hook(_module, _inputs, output):
        captured["activations"] = output

    handle = layer.register_forward_hook(hook)
    try:
        x = image.unsqueeze(0).clone().requires_grad_(True)
        logits = classifier.logits(x)
    finally:
        handle.remove()
    activations = captured["activations"]
    grads = torch.autograd.grad(
        logits[0, class_idx], activations, retain_graph=False, allow_unused=True
    )[0]
    if grads is None:
        grads = torch.zeros_like(activations)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * activations).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=image.shape[-2:], mode="bilinear", align_corners=False)
    return normalize_heatmap(cam[0, 0].detach())


def rise_masks(
    n_masks: int,
    height: int,
    width: int,
    grid: int = 7,
    keep_prob: float = 0.5,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Random binary grid masks upsampled with a random shift, [N, H, W].

    Each mask starts as a grid x grid Bernoulli(keep_prob) pattern,
    bilinearly upsampled to (grid+1) cells and cropped at a random offset
    within one cell, the standard construction for randomized-input
    sampling.
    """
    cell_h = math.ceil(height / grid)
    cell_w = math.ceil(width / grid)
    bits = (torch.rand(n_masks, 1, grid, grid, generator=generator) < keep_prob).float()
    up = F.interpolate(
        bits, size=((grid + 1) * cell_h, (grid + 1) * cell_w), mode="bilinear", align_corners=False
    )
    off_y = torch.randint(0, cell_h, (n_masks,), generator=generator)
    off_x = torch.randint(0, cell_w, (n_masks,), generator=generator)
    out = torch.empty(n_masks, height, width)
    for i in range(n_masks):
        out[i] = up[i, 0, off_y[i] : off_y[i] + height, off_x[i] : off_x[i] + width]
    return out


def rise_heatmaps(
    classifier: Explanandum,
    image: Tensor,
    classes: Sequence[int],
    n_masks: int = 4000,
    grid: int = 7,
    keep_prob: float = 0.5,
    seed: int = 0,
    chunk: int = 128,
    normalize: bool = True,
) -> Tensor:
    """Monte-Carlo importance maps for several classes sharing one mask
    sample, [len(classes), H, W].

    importance = (1 / (N * keep_prob)) * sum_i score_i * mask_i, where the
    scores are the classifier's sigmoid probabilities on the masked image.
    One forward pass per mask scores every class at once.
    """
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    h, w = image.shape[-2:]
    total = torch.zeros(len(classes), h, w)
    with torch.no_grad():
        done = 0
        while done < n_masks:
            b = min(chunk, n_masks - done)
            masks = rise_masks(b, h, w, grid, keep_prob, gen)
            probs = classifier.predict_probs(image.unsqueeze(0) * masks.unsqueeze(1))
            weights = probs[:, list(classes)]  # [b, K]
            total += torch.einsum("bk,bhw->khw", weights, masks)
            done += b
    importance = total / (n_masks * keep_prob)
    if not normalize:
        return importance
    return torch.stack([normalize_heatmap(importance[k]) for k in range(len(classes))])


def rise(
    classifier: Explanandum,
    image: Tensor,
    class_idx: int,
    n_masks: int = 4000,
    grid: int = 7,
    keep_prob: float = 0.5,
    seed: int = 0,
    chunk: int = 128,
    normalize: bool = True,
) -> Tensor:
    """Single-class randomized-input-sampling heatmap."""
    return rise_heatmaps(
        classifier, image, [class_idx], n_masks, grid, keep_prob, seed, chunk, normalize
    )[0]


def constant_mask(kind: str, size: int | tuple[int, int]) -> Tensor:
    """Sanity-check masks: all zeros, all 0.5, or all ones."""
    if isinstance(size, int):
        size = (size, size)
    values = {"zeros": 0.0, "halves": 0.5, "ones": 1.0}
    if kind not in values:
        raise ValueError(f"unknown constant mask kind {kind!r}; options: {sorted(values)}")
    return torch.full(size, values[kind])


def aggregate_baseline_masks(heatmaps: Mapping[int, Tensor], labels) -> Tensor:
    """Pixel-wise maximum of the per-class heatmaps over the present classes."""
    present = sorted({int(c) for c in labels})
    if not present:
        raise ValueError("aggregation needs at least one present class")
    missing = [c for c in present if c not in heatmaps]
    if missing:
        raise ValueError(f"missing heatmaps for classes {missing}")
    return torch.stack([heatmaps[c] for c in present]).amax(dim=0)
