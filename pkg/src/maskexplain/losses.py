"""The four-term training loss for the mask network.

total = classification + lambda_entropy * entropy
      + lambda_area * area + lambda_tv * smoothness

where classification is multi-label BCE on the target-masked image, entropy
is the (negative) prediction entropy on the complement-masked image, area
combines the mean mask coverage with a sorted-value bound keeping each
present class mask between a minimum and maximum area, and smoothness is
anisotropic total variation. Everything is differentiable w.r.t. the masks.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

import torch
from torch import Tensor

from .masks import (
    aggregate_nontarget_mask,
    aggregate_nontarget_mask_batch,
    aggregate_target_mask,
    aggregate_target_mask_batch,
    invert_mask,
    mask_area,
)


class LossNanError(RuntimeError):
    """Raised when a loss component evaluates to NaN; carries the component name."""

    def __init__(self, component: str):
        super().__init__(f"loss component '{component}' is NaN; training step aborted")
        self.component = component


@dataclass(frozen=True)
class LossConfig:
    """Weights and bounds for the composite loss.

    area_min/area_max are the per-class area bounds (fractions of the frame,
    0 < min < max < 1); prob_clamp keeps probabilities away from {0, 1}
    before logs.
    """

    lambda_entropy: float = 1.0
    lambda_area: float = 1.0
    lambda_tv: float = 1.0
    area_min: float = 0.05
    area_max: float = 0.4
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if min(self.lambda_entropy, self.lambda_area, self.lambda_tv) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.area_min < self.area_max < 1.0:
            raise ValueError(
                f"need 0 < area_min < area_max < 1, got ({self.area_min}, {self.area_max})"
            )
        if not 0.0 < self.prob_clamp <= 1e-3:
            raise ValueError(f"prob_clamp must lie in (0, 1e-3], got {self.prob_clamp}")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components for one step; `total` is the weighted sum and stays
    attached to the autograd graph when the inputs were."""

    total: Tensor
    classification: Tensor
    entropy: Tensor
    area: Tensor
    smoothness: Tensor

    def scalars(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "cls": float(self.classification.detach()),
            "ent": float(self.entropy.detach()),
            "area": float(self.area.detach()),
            "tv": float(self.smoothness.detach()),
        }


def _label_vector(labels: Iterable[int], class_count: int, ref: Tensor) -> Tensor:
    present = ref.new_zeros(class_count)
    idx = sorted({int(c) for c in labels})
    if idx and (idx[0] < 0 or idx[-1] >= class_count):
        raise ValueError(f"class indices {idx} outside [0, {class_count})")
    if idx:
        present[idx] = 1.0
    return present


def classification_loss(probs: Tensor, labels: Iterable[int], prob_clamp: float = 1e-7) -> Tensor:
    """Multi-label BCE averaged over all classes.

    -(1/C) sum_c [c present] log p_c + [c absent] log(1 - p_c), with p
    clamped into [prob_clamp, 1 - prob_clamp]. Always >= 0.
    """
    present = _label_vector(labels, probs.shape[-1], probs)
    p = probs.clamp(prob_clamp, 1.0 - prob_clamp)
    per_class = present * p.log() + (1.0 - present) * (1.0 - p).log()
    return -per_class.mean(dim=-1)


def negative_entropy_loss(probs: Tensor, prob_clamp: float = 1e-7) -> Tensor:
    """(1/C) sum_c p_c log p_c; 0 log 0 := 0 via the clamp inside the log.

    Per-class terms live in [-1/e, 0], so does the mean.
    """
    return (probs * probs.clamp_min(prob_clamp).log()).mean(dim=-1)


def area_bound_penalty(mask: Tensor, area_min: float, area_max: float) -> Tensor:
    """Sorted-value penalty that is zero exactly when the floor(Z*area_min)
    largest mask values are 1 and the Z - floor(Z*area_max) smallest are 0.

    The flattened mask is sorted descending and compared against two step
    templates: ones up to floor(Z*area_min) and ones up to floor(Z*area_max).
    Shortfall below the first and excess above the second are averaged over
    the Z pixels, so the result lies in [0, 1].
    """
    if not 0.0 < area_min < area_max < 1.0:
        raise ValueError(f"need 0 < area_min < area_max < 1, got ({area_min}, {area_max})")
    q = mask.reshape(-1).sort(descending=True).values
    z = q.numel()
    n_min = int(z * area_min)
    n_max = int(z * area_max)
    q_min = torch.zeros_like(q)
    q_min[:n_min] = 1.0
    q_max = torch.zeros_like(q)
    q_max[:n_max] = 1.0
    return ((q_min - q).clamp_min(0.0).sum() + (q - q_max).clamp_min(0.0).sum()) / z


def area_loss(
    target_mask: Tensor,
    nontarget_mask: Tensor,
    class_masks: Tensor,
    labels: Iterable[int],
    cfg: LossConfig,
) -> Tensor:
    """Mean coverage of both aggregated masks plus the average bound penalty
    over the present class masks."""
    present = sorted({int(c) for c in labels})
    if not present:
        raise ValueError("area loss needs at least one present class")
    bound = sum(
        area_bound_penalty(class_masks[c], cfg.area_min, cfg.area_max) for c in present
    ) / len(present)
    return mask_area(target_mask) + mask_area(nontarget_mask) + bound


def total_variation(mask: Tensor) -> Tensor:
    """Anisotropic TV: sum of |vertical diff| + |horizontal diff| over all
    neighbor pairs lying fully inside the mask, divided by the pixel count."""
    dv = (mask[1:, :] - mask[:-1, :]).abs().sum()
    dh = (mask[:, 1:] - mask[:, :-1]).abs().sum()
    return (dv + dh) / mask.numel()


def smoothness_loss(target_mask: Tensor, nontarget_mask: Tensor) -> Tensor:
    """TV of the target mask plus TV of the non-target mask."""
    return total_variation(target_mask) + total_variation(nontarget_mask)


def explainer_loss(
    image: Tensor,
    labels: Iterable[int],
    class_masks: Tensor,
    classifier,
    cfg: LossConfig,
    mask_space: str = "raw",
) -> LossBreakdown:
    """Full composite loss for one image.

    `image` is a raw [3, H, W] tensor in [0, 1], `class_masks` is the
    [C, H, W] network output, `classifier` is a frozen model exposing
    `masked_probs(images, masks, mask_space)`. Returns all four components
    and their weighted total; raises LossNanError if any component is NaN.
    """
    label_list = sorted({int(c) for c in labels})
    if not label_list:
        raise ValueError("training loss needs at least one present class")
    m = aggregate_target_mask(class_masks, label_list)
    n = aggregate_nontarget_mask(class_masks, label_list)
    p = classifier.masked_probs(image.unsqueeze(0), m.unsqueeze(0), mask_space)[0]
    p_inv = classifier.masked_probs(image.unsqueeze(0), invert_mask(m).unsqueeze(0), mask_space)[0]

    cls = classification_loss(p, label_list, cfg.prob_clamp)
    ent = negative_entropy_loss(p_inv, cfg.prob_clamp)
    area = area_loss(m, n, class_masks, label_list, cfg)
    smooth = smoothness_loss(m, n)
    return _compose(cls, ent, area, smooth, cfg)


def explainer_loss_batch(
    images: Tensor,
    label_matrix: Tensor,
    class_masks: Tensor,
    classifier,
    cfg: LossConfig,
    mask_space: str = "raw",
) -> LossBreakdown:
    """Vectorized composite loss averaged over a batch.

    images [B, 3, H, W] raw, label_matrix bool [B, C], class_masks
    [B, C, H, W]. Component values equal the means of the per-image losses.
    """
    if not label_matrix.any(dim=1).all():
        raise ValueError("every batch item needs at least one present class")
    m = aggregate_target_mask_batch(class_masks, label_matrix)
    n = aggregate_nontarget_mask_batch(class_masks, label_matrix)
    p = classifier.masked_probs(images, m, mask_space)
    p_inv = classifier.masked_probs(images, invert_mask(m), mask_space)

    present = label_matrix.to(class_masks.dtype)
    pc = p.clamp(cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    cls = -(present * pc.log() + (1.0 - present) * (1.0 - pc).log()).mean(dim=1).mean()
    ent = (p_inv * p_inv.clamp_min(cfg.prob_clamp).log()).mean(dim=1).mean()

    bound = _area_bound_penalty_rows(class_masks, cfg.area_min, cfg.area_max)
    bound_mean = (bound * present).sum(dim=1) / present.sum(dim=1)
    area = (m.mean(dim=(1, 2)) + n.mean(dim=(1, 2)) + bound_mean).mean()
    smooth = (_tv_rows(m) + _tv_rows(n)).mean()
    return _compose(cls, ent, area, smooth, cfg)


def _area_bound_penalty_rows(class_masks: Tensor, area_min: float, area_max: float) -> Tensor:
    """Bound penalty for every class mask in the batch; returns [B, C]."""
    b, c, h, w = class_masks.shape
    z = h * w
    q = class_masks.reshape(b * c, z).sort(dim=1, descending=True).values
    n_min = int(z * area_min)
    n_max = int(z * area_max)
    q_min = q.new_zeros(z)
    q_min[:n_min] = 1.0
    q_max = q.new_zeros(z)
    q_max[:n_max] = 1.0
    pen = ((q_min - q).clamp_min(0.0).sum(dim=1) + (q - q_max).clamp_min(0.0).sum(dim=1)) / z
    return pen.reshape(b, c)


def _tv_rows(masks: Tensor) -> Tensor:
    """Per-image anisotropic TV for a [B, H, W] stack."""
    dv = (masks[:, 1:, :] - masks[:, :-1, :]).abs().sum(dim=(1, 2))
    dh = (masks[:, :, 1:] - masks[:, :, :-1]).abs().sum(dim=(1, 2))
    return (dv + dh) / (masks.shape[1] * masks.shape[2])


def _compose(cls: Tensor, ent: Tensor, area: Tensor, smooth: Tensor, cfg: LossConfig) -> LossBreakdown:
    total = cls + cfg.lambda_entropy * ent + cfg.lambda_area * area + cfg.lambda_tv * smooth
    breakdown = LossBreakdown(total, cls, ent, area, smooth)
    for name, value in (
        ("classification", cls),
        ("entropy", ent),
        ("area", area),
        ("smoothness", smooth),
        ("total", total),
    ):
        if torch.isnan(value).any():
            raise LossNanError(name)
    return breakdown
