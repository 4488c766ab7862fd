"""Pure mask operations shared by the loss, the evaluation protocols and
the CLI.

Everything here is built from differentiable torch ops so the same
functions sit inside the training graph. Conventions: a mask is an [H, W]
tensor with values in [0, 1]; a per-class mask set is [C, H, W]; labels
are plain collections of integer class indices.
"""

from __future__ import annotations

from collections.abc import Iterable

import torch
from torch import Tensor


def _check_labels(labels: Iterable[int], class_count: int) -> list[int]:
    out = sorted({int(c) for c in labels})
    if out and (out[0] < 0 or out[-1] >= class_count):
        raise ValueError(f"class indices {out} outside [0, {class_count})")
    return out


def aggregate_target_mask(class_masks: Tensor, labels: Iterable[int]) -> Tensor:
    """Pixel-wise maximum of the class masks for the classes present in `labels`."""
    present = _check_labels(labels, class_masks.shape[0])
    if not present:
        raise ValueError("target aggregation needs at least one present class")
    return class_masks[present].amax(dim=0)


def aggregate_nontarget_mask(class_masks: Tensor, labels: Iterable[int]) -> Tensor:
    """Pixel-wise maximum over the classes absent from `labels`.

    When `labels` covers every class there is nothing to aggregate and the
    all-zeros mask is returned, so its area and total variation vanish
    downstream without special-casing.
    """
    present = set(_check_labels(labels, class_masks.shape[0]))
    absent = [c for c in range(class_masks.shape[0]) if c not in present]
    if not absent:
        return torch.zeros_like(class_masks[0])
    return class_masks[absent].amax(dim=0)


def invert_mask(mask: Tensor) -> Tensor:
    """Complement mask 1 - m."""
    return 1.0 - mask


def mask_area(mask: Tensor) -> Tensor:
    """Mean of the mask values (fraction of the frame covered)."""
    return mask.mean()


def apply_mask(image: Tensor, mask: Tensor) -> Tensor:
    """Multiply each image channel element-wise by the mask.

    `image` is [..., H, W] (typically [3, H, W] in raw pixel space, so
    masked-out pixels become black); the mask broadcasts over leading dims.
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"spatial size mismatch: image {tuple(image.shape[-2:])} vs mask {tuple(mask.shape[-2:])}"
        )
    return image * mask


def threshold_mask(mask: Tensor, t: float) -> Tensor:
    """Binarize at threshold t in (0, 1); ties (values == t) go to foreground."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {t}")
    return (mask >= t).to(mask.dtype)


def aggregate_target_mask_batch(class_masks: Tensor, label_matrix: Tensor) -> Tensor:
    """Batched target aggregation.

    class_masks: [B, C, H, W]; label_matrix: bool [B, C] with at least one
    True per row. Returns [B, H, W]. Absent channels are excluded from the
    max by filling with -1, which keeps gradients off them entirely.
    """
    if not label_matrix.any(dim=1).all():
        raise ValueError("every batch item needs at least one present class")
    filled = torch.where(label_matrix[:, :, None, None], class_masks, class_masks.new_tensor(-1.0))
    return filled.amax(dim=1)


def aggregate_nontarget_mask_batch(class_masks: Tensor, label_matrix: Tensor) -> Tensor:
    """Batched non-target aggregation; rows with all classes present get zeros."""
    filled = torch.where(label_matrix[:, :, None, None], class_masks.new_tensor(-1.0), class_masks)
    agg = filled.amax(dim=1)
    has_absent = (~label_matrix).any(dim=1)
    return torch.where(has_absent[:, None, None], agg, torch.zeros_like(agg))
