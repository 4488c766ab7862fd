"""Command-line entry points: gen-data, train-classifier, train-explainer,
explain, evaluate.

All commands are reproducible under a fixed seed, never mutate their
inputs, and write artifacts only below --out. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import torch

from . import evaluation as ev
from .classifier import Explanandum, FinetuneConfig, build_small_classifier, finetune_classifier, load_classifier
from .data import (
    DatasetManifest,
    MultiLabelDataset,
    ShapesConfig,
    generate_shapes_dataset,
    load_multilabel_dataset,
    preprocess,
    write_simple_folder,
)
from .explainer import ExplainerConfig, build_explainer
from .masks import aggregate_target_mask
from .render import image_to_png, mask_to_png, overlay
from .training import TrainConfig, explainer_from_checkpoint, train_explainer

CACHE_ENV = "EXPLAINER_CACHE"


class ConfigError(Exception):
    """Invalid configuration or arguments; maps to exit code 2."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc


def _resolve_device(name: str) -> torch.device:
    if name != "cpu" and not torch.cuda.is_available():
        raise ConfigError(f"device {name!r} requested but CUDA is unavailable")
    return torch.device(name)


def _default_data_root(tag: str) -> Path:
    root = os.environ.get(CACHE_ENV)
    if root is None:
        raise ConfigError(f"--out not given and {CACHE_ENV} is unset")
    return Path(root) / tag


def cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    counts = config.pop("counts", {"train": 2000, "val": 300, "test": 300})
    try:
        shapes_cfg = ShapesConfig(**config)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid shapes config: {exc}") from exc
    out = Path(args.out) if args.out else _default_data_root(
        f"shapes_c{shapes_cfg.class_count}_s{shapes_cfg.image_size}_seed{args.seed}"
    )
    out.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {}
    class_names: list[str] = []
    for i, (split, n) in enumerate(sorted(counts.items())):
        cfg = ShapesConfig(**{**config, "num_images": int(n)})
        ds = generate_shapes_dataset(cfg, seed=args.seed + i)
        write_simple_folder(ds, out / split)
        splits[split] = [item.name for item in ds]
        class_names = ds.class_names
        print(f"wrote {len(ds)} images to {out / split}")
    manifest = DatasetManifest(class_names=class_names, image_size=shapes_cfg.image_size, splits=splits)
    (out / "manifest.json").write_text(manifest.to_json())
    return 0


def cmd_train_classifier(args) -> int:
    config = _load_config(args.config)
    try:
        cfg = FinetuneConfig(**{**config, "seed": args.seed})
    except TypeError as exc:
        raise ConfigError(f"invalid fine-tune config: {exc}") from exc
    data_root = Path(args.data)
    train_ds = load_multilabel_dataset(data_root / "train")
    val_ds = load_multilabel_dataset(data_root / "val")
    torch.manual_seed(args.seed)
    model = build_small_classifier(
        train_ds.class_count,
        input_size=train_ds[0].image.shape[-1],
        class_names=train_ds.class_names,
        seed=args.seed,
    )
    model.net.to(_resolve_device(args.device))
    finetune_classifier(
        model,
        train_ds.image_stack(),
        train_ds.label_matrix().float(),
        cfg,
        val_ds.image_stack(),
        val_ds.label_matrix(),
        verbose=True,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.freeze()
    model.save(out / "classifier.pt")
    print(f"saved classifier to {out / 'classifier.pt'}")
    return 0


def cmd_train_explainer(args) -> int:
    config = _load_config(args.config)
    net_cfg = config.pop("explainer", {})
    try:
        train_cfg = TrainConfig.from_dict({**config, "seed": args.seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc
    classifier = load_classifier(args.classifier)
    classifier.freeze()
    dataset = load_multilabel_dataset(Path(args.data) / "train")
    try:
        explainer_cfg = ExplainerConfig(
            class_count=dataset.class_count,
            input_size=dataset[0].image.shape[-1],
            **net_cfg,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid explainer config: {exc}") from exc
    explainer = build_explainer(explainer_cfg, seed=args.seed)
    device = _resolve_device(args.device)
    explainer.to(device)
    classifier.net.to(device)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_explainer(
        classifier,
        explainer,
        dataset,
        train_cfg,
        log_path=out / "train_log.jsonl",
        checkpoint_dir=out,
        resume_from=args.resume,
        verbose=True,
    )
    print(f"trained {result.steps} steps; checkpoint at {out / 'explainer_final.pt'}")
    return 0


def _class_names_for(args, class_count: int) -> list[str]:
    if args.classifier:
        manifest_path = Path(args.classifier).with_suffix(".manifest.json")
        if manifest_path.exists():
            names = json.loads(manifest_path.read_text())["class_names"]
            if len(names) == class_count:
                return names
    return [f"class{i}" for i in range(class_count)]


def cmd_explain(args) -> int:
    explainer = explainer_from_checkpoint(args.checkpoint)
    cfg = explainer.cfg
    names = _class_names_for(args, cfg.class_count)
    labels_map = {}
    if args.labels_json:
        labels_map = json.loads(Path(args.labels_json).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    top_k = min(args.top_k, cfg.class_count)

    n_ok = 0
    for image_path in args.images:
        image_path = Path(image_path)
        try:
            from PIL import Image

            pil = Image.open(image_path)
            image = preprocess(pil, cfg.input_size)
        except Exception as exc:
            warnings.warn(f"cannot read {image_path}: {exc}; skipped")
            continue
        class_masks = explainer.class_masks(image)
        stem = image_path.stem
        files = {}
        for c in range(cfg.class_count):
            mask_file = out / f"{stem}_mask_{names[c]}.png"
            mask_to_png(class_masks[c], mask_file)
            files[names[c]] = mask_file.name
        labels = labels_map.get(image_path.name)
        ranking = ev.rank_class_attributions(class_masks, top_k)
        if labels:
            agg = aggregate_target_mask(class_masks, labels)
        else:
            agg = class_masks[[c for c, _ in ranking]].amax(dim=0)
        overlay_file = out / f"{stem}_overlay.png"
        image_to_png(overlay(image, agg), overlay_file)
        summary = {
            "image": image_path.name,
            "labels": sorted(labels) if labels else None,
            "top_attributed_classes": [
                {"class": c, "name": names[c], "ama": round(score, 4)} for c, score in ranking
            ],
            "files": {**files, "overlay": overlay_file.name},
        }
        (out / f"{stem}_attribution.json").write_text(json.dumps(summary, indent=2))
        n_ok += 1
    if n_ok == 0:
        print("error: no input image could be processed", file=sys.stderr)
        return 1
    print(f"explained {n_ok}/{len(args.images)} images into {out}")
    return 0


def _build_methods(args, classifier, explainer) -> dict[str, ev.Attributor]:
    methods = {}
    for name in (args.methods or "explainer").split(","):
        name = name.strip()
        if name == "explainer":
            if explainer is None:
                raise ConfigError("method 'explainer' needs --explainer CKPT")
            methods[name] = ev.explainer_attributor(explainer)
        elif name == "gradcam":
            methods[name] = ev.gradcam_attributor(classifier)
        elif name == "rise":
            methods[name] = ev.rise_attributor(classifier, seed=args.seed)
        else:
            raise ConfigError(f"unknown method {name!r}; options: explainer, gradcam, rise")
    return methods


def cmd_evaluate(args) -> int:
    classifier = load_classifier(args.classifier)
    classifier.freeze()
    explainer = explainer_from_checkpoint(args.explainer) if args.explainer else None
    dataset = load_multilabel_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.kind == "seg":
        report = ev.evaluate_segmentation(_build_methods(args, classifier, explainer), dataset, classifier)
        report.write(out / "segmentation")
        print(report.to_json())
    elif args.kind == "classwise":
        if explainer is None:
            raise ConfigError("classwise evaluation needs --explainer CKPT")
        targets = [int(t) for t in args.target_classes.split(",")] if args.target_classes else None
        thresholds = (
            [float(t) for t in args.thresholds.split(",")] if args.thresholds else ev.CLASSWISE_THRESHOLDS
        )
        table = ev.classwise_confusion(
            ev.explainer_class_masks(explainer), classifier, dataset, targets, thresholds
        )
        table.write(out / "classwise")
        print(table.to_json())
    elif args.kind == "masked-cls":
        if explainer is None:
            raise ConfigError("masked-cls evaluation needs --explainer CKPT")
        unmasked_t, masked_t = 0.5, None
        if args.thresholds:
            parts = args.thresholds.split(",")
            unmasked_t = float(parts[0])
            if len(parts) > 1 and parts[1] != "auto":
                masked_t = float(parts[1])
        report = ev.masked_classification_report(classifier, explainer, dataset, unmasked_t, masked_t)
        (out / "masked_cls.json").write_text(json.dumps(report, indent=2))
        print(json.dumps(report, indent=2))
    elif args.kind == "benchmark":
        methods = _build_methods(args, classifier, explainer)
        times = ev.timing_benchmark(methods, dataset, args.num_images)
        ev.write_timing_report(times, out / "benchmark")
        print(json.dumps(times, indent=2))
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown evaluation kind {args.kind!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskexplain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--device", default="cpu")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    common(p)
    p.add_argument("--out", default=None, help=f"output root (default: ${CACHE_ENV}/<tag>)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-classifier", help="train and freeze the small classifier")
    common(p)
    p.add_argument("--data", required=True, help="dataset root with train/ and val/")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-explainer", help="train the mask network against a frozen classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True, help="classifier checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="resume from an epoch checkpoint")
    p.set_defaults(func=cmd_train_explainer)

    p = sub.add_parser("explain", help="emit per-class masks, overlay, and class ranking")
    common(p)
    p.add_argument("--checkpoint", required=True, help="explainer checkpoint")
    p.add_argument("--classifier", default=None, help="classifier checkpoint (for class names)")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--labels-json", default=None, help="optional {filename: [class indices]} map")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="run one of the evaluation protocols")
    common(p)
    p.add_argument("kind", choices=["seg", "classwise", "masked-cls", "benchmark"])
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--classifier", required=True)
    p.add_argument("--explainer", default=None)
    p.add_argument("--methods", default=None, help="comma list: explainer,gradcam,rise")
    p.add_argument("--thresholds", default=None, help="comma-separated thresholds")
    p.add_argument("--target-classes", default=None, help="comma list of class indices")
    p.add_argument("-n", "--num-images", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:  # pragma: no cover - thin wrapper
    sys.exit(main())
