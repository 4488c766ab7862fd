#!/usr/bin/env python3
"""End-to-end synthetic pipeline: generate shapes, train + freeze the
classifier, train the mask network, then run every evaluation protocol.

Mirrors the CLI pipeline through the library API and prints a summary of
the quantities the acceptance suite checks (classifier F1, validation IoU
against ground truth, class-specific confusion margins, masked-vs-unmasked
F1, timing).
"""

import argparse
import json
import time
from pathlib import Path

import torch

from maskexplain.classifier import FinetuneConfig, build_small_classifier, finetune_classifier, per_class_f1
from maskexplain.data import ShapesConfig, generate_shapes_dataset
from maskexplain.evaluation import (
    classwise_confusion,
    constant_attributor,
    evaluate_segmentation,
    explainer_attributor,
    explainer_class_masks,
    masked_classification_report,
    rise_attributor,
    seg_metrics,
    timing_benchmark,
)
from maskexplain.explainer import ExplainerConfig, build_explainer
from maskexplain.losses import LossConfig
from maskexplain.masks import aggregate_target_mask
from maskexplain.training import TrainConfig, save_checkpoint, train_explainer


def mean_target_iou(explainer, dataset):
    scores = []
    for item in dataset:
        mask = aggregate_target_mask(explainer.class_masks(item.image), item.labels)
        scores.append(seg_metrics(mask, item.gt_aggregate()).iou)
    return sum(scores) / len(scores)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--train-images", type=int, default=2000)
    parser.add_argument("--val-images", type=int, default=300)
    parser.add_argument("--cls-epochs", type=int, default=6)
    parser.add_argument("--expl-epochs", type=int, default=8)
    parser.add_argument("--expl-lr", type=float, default=1e-3)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--base-width", type=int, default=16)
    parser.add_argument("--skip-benchmark", action="store_true")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    print(f"[1/5] generating shapes data ({args.train_images} train)")
    shape_kw = dict(class_count=args.classes, image_size=args.size)
    train = generate_shapes_dataset(ShapesConfig(num_images=args.train_images, **shape_kw), seed=args.seed)
    val = generate_shapes_dataset(ShapesConfig(num_images=args.val_images, **shape_kw), seed=args.seed + 1)

    print("[2/5] training the classifier")
    classifier = build_small_classifier(args.classes, input_size=args.size,
                                        class_names=train.class_names, seed=args.seed)
    finetune_classifier(
        classifier,
        train.image_stack(),
        train.label_matrix().float(),
        FinetuneConfig(epochs=args.cls_epochs, batch_size=64, learning_rate=2e-3, seed=args.seed),
        val.image_stack(),
        val.label_matrix(),
        verbose=True,
    )
    probs = classifier.predict_probs(val.image_stack())
    f1s = per_class_f1(probs >= 0.5, val.label_matrix())
    print(f"    per-class F1: {[round(v, 4) for v in f1s]}")
    classifier.freeze()
    checksum_before = classifier.parameter_checksum()
    classifier.save(out / "classifier.pt")

    print("[3/5] training the mask network")
    explainer = build_explainer(
        ExplainerConfig(class_count=args.classes, input_size=args.size, base_width=args.base_width),
        seed=args.seed,
    )
    cfg = TrainConfig(
        loss=LossConfig(),
        learning_rate=args.expl_lr,
        epochs=args.expl_epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    t_train = time.time()
    result = train_explainer(classifier, explainer, train, cfg,
                             log_path=out / "train_log.jsonl", checkpoint_dir=out, verbose=True)
    print(f"    {result.steps} steps in {time.time() - t_train:.0f}s")
    save_checkpoint(out / "explainer_final.pt", explainer)
    assert classifier.parameter_checksum() == checksum_before, "classifier drifted"

    print("[4/5] evaluation protocols")
    iou = mean_target_iou(explainer, val)
    half_iou = sum(
        seg_metrics(torch.full((args.size, args.size), 0.5), item.gt_aggregate()).iou for item in val
    ) / len(val)
    print(f"    mean target-mask IoU: {iou:.4f} (0.5-constant baseline {half_iou:.4f})")

    seg = evaluate_segmentation({"explainer": explainer_attributor(explainer)}, val, classifier)
    seg.write(out / "segmentation")
    print("    segmentation rows: " + json.dumps({k: round(v.iou, 3) for k, v in seg.rows.items()}))

    table = classwise_confusion(explainer_class_masks(explainer), classifier, val)
    table.write(out / "classwise")
    for t in table.target_classes:
        print(
            f"    class {t}: none {table.none_column[t]:.1f} diag {table.diagonal(t):.1f} "
            f"max-off {table.max_off_diagonal(t):.1f}"
        )

    report = masked_classification_report(classifier, explainer, val)
    (out / "masked_cls.json").write_text(json.dumps(report, indent=2))
    print(
        f"    micro-F1 unmasked {report['unmasked']['f1'] * 100:.1f} "
        f"masked {report['masked']['f1'] * 100:.1f}"
    )

    print("[5/5] timing benchmark")
    if not args.skip_benchmark:
        methods = {
            "explainer": explainer_attributor(explainer),
            "rise": rise_attributor(classifier, seed=args.seed),
        }
        times = timing_benchmark(methods, val, n=50)
        print(f"    explainer {times['explainer']:.2f}s vs rise {times['rise']:.2f}s "
              f"({times['rise'] / max(times['explainer'], 1e-9):.0f}x)")
    print(f"done in {time.time() - t0:.0f}s; artifacts under {out}")


if __name__ == "__main__":
    main()
