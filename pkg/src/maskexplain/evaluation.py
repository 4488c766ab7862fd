"""Everything that scores masks: segmentation-style metrics against ground
truth, confusion under class-specific masking, classification with masked
inputs, activation-based class ranking, and wall-time comparisons.

Attributors are callables mapping a LabeledImage to one aggregated [H, W]
mask; per-class attributors map an image to a [C, H, W] mask set. Metric
arithmetic runs in float64 so analytic identities hold to 1e-9. Reports
serialize as both CSV and JSON with the attributor rows mirroring the usual
table layout (sanity rows first, then methods).
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .baselines import aggregate_baseline_masks, constant_mask, grad_cam, rise_heatmaps
from .classifier import Explanandum, micro_f1
from .data import LabeledImage, MultiLabelDataset
from .explainer import MaskExplainer
from .masks import aggregate_target_mask, apply_mask, mask_area, threshold_mask

Attributor = Callable[[LabeledImage], Tensor]
PerClassAttributor = Callable[[LabeledImage], Tensor]

CLASSWISE_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
SAL_AREA_FLOOR = 0.05


@dataclass(frozen=True)
class SegMetrics:
    acc: float
    iou: float
    mae: float
    sal: float | None = None


def seg_metrics(mask: Tensor, gt: Tensor) -> SegMetrics:
    """Per-image pixel metrics against a binary ground truth.

    acc averages m*g + (1-m)(1-g) over pixels without thresholding; iou uses
    the pixel-wise min as intersection and max as union (0 when the union is
    empty); mae is the mean absolute difference. For binary gt these satisfy
    acc + mae = 1.
    """
    if mask.shape != gt.shape:
        raise ValueError(f"shape mismatch: mask {tuple(mask.shape)} vs gt {tuple(gt.shape)}")
    g = gt.double()
    if not bool(((g == 0.0) | (g == 1.0)).all()):
        raise ValueError("ground truth must be binary for acc/iou")
    m = mask.double()
    acc = (m * g + (1.0 - m) * (1.0 - g)).mean()
    union = torch.maximum(m, g).sum()
    iou = torch.minimum(m, g).sum() / union if union > 0 else torch.zeros((), dtype=torch.float64)
    mae = (m - g).abs().mean()
    return SegMetrics(acc=float(acc), iou=float(iou), mae=float(mae))


def saliency_score(
    mask: Tensor, probs: Tensor, labels, floor: float = SAL_AREA_FLOOR, eps: float = 1e-7
) -> float:
    """log of the clamped mask area minus log of the summed present-class
    probability; smaller is better."""
    present = sorted({int(c) for c in labels})
    if not present:
        raise ValueError("saliency score needs at least one present class")
    area = float(mask_area(mask.double()))
    prob_sum = max(float(probs.double()[present].sum()), eps)
    return float(torch.log(torch.tensor(max(area, floor), dtype=torch.float64))) - float(
        torch.log(torch.tensor(prob_sum, dtype=torch.float64))
    )


# ---------------------------------------------------------------------------
# attributor factories

def explainer_attributor(explainer: MaskExplainer) -> Attributor:
    """Aggregated target mask from the mask network, given the item labels."""

    def run(item: LabeledImage) -> Tensor:
        masks = explainer.class_masks(item.image)
        return aggregate_target_mask(masks, item.labels)

    return run


def gradcam_attributor(classifier: Explanandum) -> Attributor:
    def run(item: LabeledImage) -> Tensor:
        heatmaps = {c: grad_cam(classifier, item.image, c) for c in item.labels}
        return aggregate_baseline_masks(heatmaps, item.labels)

    return run


def rise_attributor(classifier: Explanandum, n_masks: int = 4000, grid: int = 7,
                    keep_prob: float = 0.5, seed: int = 0, chunk: int = 128) -> Attributor:
    def run(item: LabeledImage) -> Tensor:
        classes = sorted(item.labels)
        maps = rise_heatmaps(classifier, item.image, classes, n_masks, grid, keep_prob, seed, chunk)
        return aggregate_baseline_masks(dict(zip(classes, maps)), item.labels)

    return run


def constant_attributor(kind: str) -> Attributor:
    def run(item: LabeledImage) -> Tensor:
        return constant_mask(kind, tuple(item.image.shape[-2:]))

    return run


def ground_truth_attributor() -> Attributor:
    def run(item: LabeledImage) -> Tensor:
        gt = item.gt_aggregate()
        if gt is None:
            raise ValueError(f"item {item.name!r} has no ground-truth segmentation")
        return gt

    return run


SANITY_ROWS = ("0", "0.5", "1", "G.T.")


def _sanity_attributors() -> dict[str, Attributor]:
    return {
        "0": constant_attributor("zeros"),
        "0.5": constant_attributor("halves"),
        "1": constant_attributor("ones"),
        "G.T.": ground_truth_attributor(),
    }


@dataclass
class SegReport:
    """Averaged metrics per attributor row, in insertion order."""

    rows: dict[str, SegMetrics]

    def to_json(self) -> str:
        return json.dumps(
            {name: {"acc": m.acc, "iou": m.iou, "sal": m.sal, "mae": m.mae} for name, m in self.rows.items()},
            indent=2,
        )

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(self.to_json())
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attributor", "acc", "iou", "sal", "mae"])
            for name, m in self.rows.items():
                writer.writerow([name, f"{m.acc:.6f}", f"{m.iou:.6f}", f"{m.sal:.6f}", f"{m.mae:.6f}"])


def evaluate_segmentation(
    attributors: Mapping[str, Attributor],
    dataset: MultiLabelDataset,
    classifier: Explanandum,
    include_sanity: bool = True,
) -> SegReport:
    """Per-image metrics averaged over every item with a ground truth;
    saliency uses the classifier's probabilities on the row's masked image."""
    items = [item for item in dataset if item.gt_masks is not None and item.labels]
    if not items:
        raise ValueError("no items with ground-truth segmentation to evaluate")
    if len(items) < len(dataset):
        warnings.warn(f"{len(dataset) - len(items)} items lack segmentation or labels; skipped")

    rows: dict[str, Attributor] = {}
    if include_sanity:
        rows.update(_sanity_attributors())
    rows.update(attributors)

    report: dict[str, SegMetrics] = {}
    for name, attributor in rows.items():
        accs, ious, maes, sals = [], [], [], []
        for item in items:
            mask = attributor(item)
            metrics = seg_metrics(mask, item.gt_aggregate())
            with torch.no_grad():
                probs = classifier.masked_probs(
                    item.image.unsqueeze(0), mask.to(item.image.dtype).unsqueeze(0)
                )[0]
            sals.append(saliency_score(mask, probs, item.labels))
            accs.append(metrics.acc)
            ious.append(metrics.iou)
            maes.append(metrics.mae)
        k = len(items)
        report[name] = SegMetrics(
            acc=sum(accs) / k, iou=sum(ious) / k, mae=sum(maes) / k, sal=sum(sals) / k
        )
    return SegReport(report)


@dataclass
class ClasswiseTable:
    """Mean softmax probabilities (in percent) of each target class under
    each class-specific mask; 'none' is the unmasked reference column."""

    target_classes: list[int]
    mask_classes: list[int]
    class_names: list[str]
    none_column: dict[int, float]
    cells: dict[int, dict[int, float]]  # target -> mask class -> percent

    def diagonal(self, target: int) -> float:
        return self.cells[target][target]

    def max_off_diagonal(self, target: int) -> float:
        return max(v for c, v in self.cells[target].items() if c != target)

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_names": self.class_names,
                "targets": {
                    str(t): {
                        "none": self.none_column[t],
                        **{str(c): self.cells[t][c] for c in self.mask_classes},
                    }
                    for t in self.target_classes
                },
            },
            indent=2,
        )

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(self.to_json())
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target", "none"] + [self.class_names[c] for c in self.mask_classes])
            for t in self.target_classes:
                writer.writerow(
                    [self.class_names[t], f"{self.none_column[t]:.2f}"]
                    + [f"{self.cells[t][c]:.2f}" for c in self.mask_classes]
                )


def classwise_confusion(
    per_class_attributor: PerClassAttributor,
    classifier: Explanandum,
    dataset: MultiLabelDataset,
    target_classes: Sequence[int] | None = None,
    thresholds: Sequence[float] = CLASSWISE_THRESHOLDS,
) -> ClasswiseTable:
    """Class-specific masking protocol.

    For every image containing target class t, record softmax(t) on the
    unmasked image, then for each mask class c the average softmax(t) over
    the thresholded applications of mask c (nine uniform thresholds by
    default). Cells are means over images, times 100.
    """
    targets = list(target_classes) if target_classes is not None else list(range(dataset.class_count))
    mask_classes = targets
    none_col: dict[int, float] = {}
    cells: dict[int, dict[int, float]] = {}
    kept_targets = []
    for t in targets:
        items = [item for item in dataset if t in item.labels]
        if not items:
            warnings.warn(f"no test images contain class {t}; row omitted")
            continue
        kept_targets.append(t)
        none_scores = []
        sums = {c: 0.0 for c in mask_classes}
        with torch.no_grad():
            for item in items:
                probs_none = classifier.predict_softmax(item.image.unsqueeze(0))[0]
                none_scores.append(float(probs_none[t]))
                class_masks = per_class_attributor(item)
                for c in mask_classes:
                    stack = torch.stack(
                        [
                            apply_mask(item.image, threshold_mask(class_masks[c], tau))
                            for tau in thresholds
                        ]
                    )
                    soft = classifier.predict_softmax(stack)
                    sums[c] += float(soft[:, t].mean())
        none_col[t] = 100.0 * sum(none_scores) / len(items)
        cells[t] = {c: 100.0 * sums[c] / len(items) for c in mask_classes}
    return ClasswiseTable(
        target_classes=kept_targets,
        mask_classes=mask_classes,
        class_names=dataset.class_names,
        none_column=none_col,
        cells=cells,
    )


def explainer_class_masks(explainer: MaskExplainer) -> PerClassAttributor:
    def run(item: LabeledImage) -> Tensor:
        return explainer.class_masks(item.image)

    return run


def tune_decision_threshold(probs: Tensor, targets: Tensor, grid: Sequence[float] | None = None) -> float:
    """Pick the decision threshold maximizing micro-F1 on the given split."""
    if grid is None:
        grid = [round(0.05 * k, 2) for k in range(1, 20)]
    best_t, best_f1 = 0.5, -1.0
    for t in grid:
        _, _, f1 = micro_f1(probs >= t, targets)
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t


def masked_classification_report(
    classifier: Explanandum,
    explainer: MaskExplainer,
    dataset: MultiLabelDataset,
    unmasked_threshold: float = 0.5,
    masked_threshold: float | None = None,
) -> dict:
    """Micro-averaged precision/recall/F1 for unmasked vs target-masked
    inputs. Masked inputs carry systematically lower logits, so their
    decision threshold is tuned separately when not supplied."""
    targets = dataset.label_matrix()
    with torch.no_grad():
        plain = torch.cat(
            [classifier.predict_probs(item.image.unsqueeze(0)) for item in dataset]
        )
        masked = []
        for item in dataset:
            masks = explainer.class_masks(item.image)
            m = aggregate_target_mask(masks, item.labels)
            masked.append(classifier.masked_probs(item.image.unsqueeze(0), m.unsqueeze(0)))
        masked = torch.cat(masked)
    if masked_threshold is None:
        masked_threshold = tune_decision_threshold(masked, targets)
    p_u, r_u, f_u = micro_f1(plain >= unmasked_threshold, targets)
    p_m, r_m, f_m = micro_f1(masked >= masked_threshold, targets)
    return {
        "unmasked": {"precision": p_u, "recall": r_u, "f1": f_u, "threshold": unmasked_threshold},
        "masked": {"precision": p_m, "recall": r_m, "f1": f_m, "threshold": masked_threshold},
    }


def rank_class_attributions(class_masks: Tensor, k: int) -> list[tuple[int, float]]:
    """Top-k classes by average mask activation, reported times 100.

    Ties resolve to the lower class index.
    """
    if k > class_masks.shape[0]:
        raise ValueError(f"k={k} exceeds class count {class_masks.shape[0]}")
    ama = [(c, float(class_masks[c].mean()) * 100.0) for c in range(class_masks.shape[0])]
    ama.sort(key=lambda pair: (-pair[1], pair[0]))
    return ama[:k]


def timing_benchmark(
    methods: Mapping[str, Attributor], dataset: MultiLabelDataset, n: int
) -> dict[str, float]:
    """Total wall time per method to produce aggregated masks for the first
    n items, executed serially on identical inputs."""
    items = list(dataset)[:n]
    times: dict[str, float] = {}
    for name, method in methods.items():
        start = time.perf_counter()
        for item in items:
            method(item)
        times[name] = time.perf_counter() - start if items else 0.0
    return times


def write_timing_report(times: Mapping[str, float], stem: str | Path) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps(dict(times), indent=2))
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seconds"])
        for name, seconds in times.items():
            writer.writerow([name, f"{seconds:.6f}"])
