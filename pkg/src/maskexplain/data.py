"""Datasets: a synthetic shapes generator plus loaders for common layouts.

The generator renders 1-3 non-overlapping colored shapes per image on a
low-amplitude noise texture (so nothing is solvable by thresholding a flat
background) and keeps exact per-class binary segmentation masks. Loaders
cover a simple folder layout (images/ + labels.json + optional seg/),
VOC-style XML annotations and COCO-style JSON.
"""

from __future__ import annotations

import json
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch import Tensor


@dataclass
class LabeledImage:
    """A raw [3, H, W] float image in [0, 1] with its label set and optional
    per-class binary ground-truth masks [C, H, W]."""

    image: Tensor
    labels: frozenset[int]
    gt_masks: Tensor | None = None
    name: str = ""

    def gt_aggregate(self) -> Tensor | None:
        """Pixel-wise max of the per-class ground-truth masks."""
        if self.gt_masks is None:
            return None
        return self.gt_masks.amax(dim=0)


@dataclass
class DatasetManifest:
    class_names: list[str]
    image_size: int
    normalization_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalization_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    splits: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_names": self.class_names,
                "image_size": self.image_size,
                "normalization_mean": list(self.normalization_mean),
                "normalization_std": list(self.normalization_std),
                "splits": self.splits,
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        d = json.loads(text)
        return DatasetManifest(
            class_names=d["class_names"],
            image_size=d["image_size"],
            normalization_mean=tuple(d.get("normalization_mean", (0, 0, 0))),
            normalization_std=tuple(d.get("normalization_std", (1, 1, 1))),
            splits=d.get("splits", {}),
        )


class MultiLabelDataset:
    """An in-memory list of labeled images sharing one class vocabulary."""

    def __init__(self, items: list[LabeledImage], class_names: list[str]):
        if not items:
            raise ValueError("dataset is empty")
        self.items = items
        self.class_names = class_names

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> LabeledImage:
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    def label_matrix(self) -> Tensor:
        """Multi-hot [N, C] bool tensor of the label sets."""
        mat = torch.zeros(len(self.items), self.class_count, dtype=torch.bool)
        for i, item in enumerate(self.items):
            for c in item.labels:
                mat[i, c] = True
        return mat

    def image_stack(self) -> Tensor:
        return torch.stack([item.image for item in self.items])


# Shape archetypes: (name, fill color). One class per archetype; geometry is
# drawn analytically so ground-truth masks are pixel-exact.
SHAPE_ARCHETYPES = [
    ("red_circle", (0.85, 0.15, 0.15)),
    ("green_square", (0.15, 0.8, 0.2)),
    ("blue_triangle", (0.2, 0.3, 0.9)),
    ("yellow_diamond", (0.9, 0.85, 0.1)),
    ("magenta_ring", (0.85, 0.2, 0.8)),
    ("cyan_cross", (0.1, 0.8, 0.85)),
]


@dataclass
class ShapesConfig:
    class_count: int = 3
    image_size: int = 64
    num_images: int = 2000
    min_shapes: int = 1
    max_shapes: int = 3
    size_range: tuple[float, float] = (0.32, 0.5)  # shape diameter as frame fraction
    background_level: tuple[float, float] = (0.25, 0.55)
    noise_amplitude: float = 0.04
    foreground_band: tuple[float, float] = (0.05, 0.45)  # expected mean GT fraction

    def __post_init__(self):
        if self.class_count > len(SHAPE_ARCHETYPES):
            raise ValueError(
                f"class_count {self.class_count} exceeds the {len(SHAPE_ARCHETYPES)} archetypes"
            )
        if not 0 < self.min_shapes <= self.max_shapes <= self.class_count:
            raise ValueError("need 0 < min_shapes <= max_shapes <= class_count")
        if self.size_range[1] >= 1.0:
            raise ValueError("shapes must be smaller than the canvas")


def _shape_mask(kind: str, size: int, cx: float, cy: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if kind.endswith("circle"):
        return dx * dx + dy * dy <= half * half
    if kind.endswith("square"):
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind.endswith("triangle"):
        # upward triangle inscribed in the bounding box
        return (dy <= half) & (dy >= -half) & (np.abs(dx) <= (dy + half) / 2)
    if kind.endswith("diamond"):
        return np.abs(dx) + np.abs(dy) <= half
    if kind.endswith("ring"):
        r2 = dx * dx + dy * dy
        return (r2 <= half * half) & (r2 >= (0.55 * half) ** 2)
    if kind.endswith("cross"):
        arm = half * 0.38
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= half)
        )
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, size: int, cfg: ShapesConfig) -> np.ndarray:
    lo, hi = cfg.background_level
    coarse = rng.uniform(lo, hi, size=(3, 8, 8)).astype(np.float32)
    t = torch.from_numpy(coarse).unsqueeze(0)
    smooth = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=(3, size, size))
    return np.clip(smooth[0].numpy() + noise.astype(np.float32), 0.0, 1.0)


def generate_shapes_dataset(cfg: ShapesConfig, seed: int = 0) -> MultiLabelDataset:
    """Deterministic synthetic dataset with exact per-class segmentations.

    Each image holds 1-3 shapes of distinct classes placed without overlap;
    the label set equals the set of rendered classes. Images are snapped to
    8-bit depth so the in-memory dataset round-trips PNG serialization
    exactly.
    """
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    archetypes = SHAPE_ARCHETYPES[: cfg.class_count]
    items: list[LabeledImage] = []
    for index in range(cfg.num_images):
        img = _background(rng, size, cfg)
        gt = np.zeros((cfg.class_count, size, size), dtype=bool)
        count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        classes = rng.choice(cfg.class_count, size=count, replace=False)
        occupied = np.zeros((size, size), dtype=bool)
        for c in classes:
            kind, color = archetypes[c]
            for _ in range(60):
                half = 0.5 * size * rng.uniform(*cfg.size_range)
                cx = rng.uniform(half, size - 1 - half)
                cy = rng.uniform(half, size - 1 - half)
                mask = _shape_mask(kind, size, cx, cy, half)
                if not (mask & occupied).any():
                    break
            else:
                continue  # could not place without overlap; drop this shape
            occupied |= mask
            gt[c] |= mask
            jitter = rng.uniform(-0.05, 0.05, size=3)
            for ch in range(3):
                img[ch][mask] = np.clip(color[ch] + jitter[ch], 0.0, 1.0)
        img = np.round(img * 255.0) / 255.0
        labels = frozenset(int(c) for c in range(cfg.class_count) if gt[c].any())
        if not labels:
            continue
        items.append(
            LabeledImage(
                image=torch.from_numpy(img.astype(np.float32)),
                labels=labels,
                gt_masks=torch.from_numpy(gt).float(),
                name=f"shapes_{index:05d}",
            )
        )
    class_names = [name for name, _ in archetypes]
    return MultiLabelDataset(items, class_names)


def write_simple_folder(dataset: MultiLabelDataset, path: str | Path) -> None:
    """Persist a dataset in the simple-folder layout.

    images/<name>.png, labels.json mapping filename to class indices,
    seg/<name>_c<idx>.png binary masks, manifest.json with class metadata.
    """
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    labels: dict[str, list[int]] = {}
    has_seg = any(item.gt_masks is not None for item in dataset)
    if has_seg:
        (path / "seg").mkdir(exist_ok=True)
    for item in dataset:
        fname = f"{item.name}.png"
        arr = (item.image.numpy() * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(path / "images" / fname)
        labels[fname] = sorted(item.labels)
        if item.gt_masks is not None:
            for c in range(item.gt_masks.shape[0]):
                if not bool(item.gt_masks[c].any()):
                    continue
                m = (item.gt_masks[c].numpy() * 255).astype(np.uint8)
                Image.fromarray(m, mode="L").save(path / "seg" / f"{item.name}_c{c}.png")
    (path / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True))
    manifest = DatasetManifest(
        class_names=dataset.class_names,
        image_size=dataset[0].image.shape[-1],
        splits={},
    )
    (path / "manifest.json").write_text(manifest.to_json())


def _find_manifest(path: Path) -> DatasetManifest | None:
    for candidate in (path / "manifest.json", path.parent / "manifest.json"):
        if candidate.exists():
            return DatasetManifest.from_json(candidate.read_text())
    return None


def _load_simple_folder(path: Path) -> MultiLabelDataset:
    labels_file = path / "labels.json"
    if not labels_file.exists():
        raise FileNotFoundError(f"no labels.json under {path}")
    labels = json.loads(labels_file.read_text())
    manifest = _find_manifest(path)
    if manifest is not None:
        class_names = manifest.class_names
    else:
        top = max((max(v) for v in labels.values() if v), default=-1)
        class_names = [f"class{i}" for i in range(top + 1)]
    class_count = len(class_names)

    items = []
    for fname in sorted(labels):
        img_path = path / "images" / fname
        if not img_path.exists():
            warnings.warn(f"image {fname} listed in labels.json but missing on disk; skipped")
            continue
        arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        image = torch.from_numpy(arr.transpose(2, 0, 1))
        stem = Path(fname).stem
        gt = None
        seg_dir = path / "seg"
        if seg_dir.exists():
            masks = torch.zeros(class_count, image.shape[1], image.shape[2])
            found = False
            for c in range(class_count):
                seg_path = seg_dir / f"{stem}_c{c}.png"
                if seg_path.exists():
                    m = np.asarray(Image.open(seg_path).convert("L"), dtype=np.float32) / 255.0
                    masks[c] = torch.from_numpy((m >= 0.5).astype(np.float32))
                    found = True
            if found:
                gt = masks
        items.append(
            LabeledImage(
                image=image,
                labels=frozenset(int(c) for c in labels[fname]),
                gt_masks=gt,
                name=stem,
            )
        )
    if not items:
        raise ValueError(f"dataset at {path} is empty")
    return MultiLabelDataset(items, class_names)


VOC_CLASSES = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
]


def _load_voc(root: Path, image_size: int | None) -> MultiLabelDataset:
    """VOC-style layout: JPEGImages/, Annotations/*.xml, optional
    SegmentationClass/ palettized maps."""
    ann_dir = root / "Annotations"
    img_dir = root / "JPEGImages"
    seg_dir = root / "SegmentationClass"
    if not ann_dir.exists():
        raise FileNotFoundError(f"no Annotations directory under {root}")
    class_to_idx = {name: i for i, name in enumerate(VOC_CLASSES)}
    items = []
    for img_path in sorted(img_dir.iterdir()):
        stem = img_path.stem
        xml_path = ann_dir / f"{stem}.xml"
        if not xml_path.exists():
            warnings.warn(f"missing annotation for {stem}; item skipped")
            continue
        objects = ET.parse(xml_path).getroot().findall(".//object/name")
        labels = frozenset(class_to_idx[o.text] for o in objects if o.text in class_to_idx)
        pil = Image.open(img_path).convert("RGB")
        gt = None
        seg_path = seg_dir / f"{stem}.png"
        if seg_path.exists():
            seg = Image.open(seg_path)
            if image_size is not None:
                seg = seg.resize((image_size, image_size), Image.NEAREST)
            seg_arr = np.asarray(seg)
            gt = torch.zeros(len(VOC_CLASSES), seg_arr.shape[0], seg_arr.shape[1])
            for c in range(len(VOC_CLASSES)):
                gt[c] = torch.from_numpy((seg_arr == c + 1).astype(np.float32))
        if image_size is not None:
            pil = pil.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float32) / 255.0
        items.append(
            LabeledImage(torch.from_numpy(arr.transpose(2, 0, 1)), labels, gt, name=stem)
        )
    if not items:
        raise ValueError(f"no usable items under {root}")
    return MultiLabelDataset(items, list(VOC_CLASSES))


def _load_coco(json_path: Path, image_size: int | None) -> MultiLabelDataset:
    """COCO-style instances JSON next to an images directory.

    Polygon segmentations are rasterized into per-class masks; RLE
    segmentations are skipped with a warning.
    """
    spec = json.loads(json_path.read_text())
    categories = sorted(spec["categories"], key=lambda c: c["id"])
    cat_to_idx = {c["id"]: i for i, c in enumerate(categories)}
    class_names = [c["name"] for c in categories]
    img_dir = json_path.parent / "images"

    by_image: dict[int, list[dict]] = {}
    for ann in spec["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)

    items = []
    for info in spec["images"]:
        img_path = img_dir / info["file_name"]
        if not img_path.exists():
            warnings.warn(f"missing image file {info['file_name']}; item skipped")
            continue
        anns = by_image.get(info["id"], [])
        labels = frozenset(cat_to_idx[a["category_id"]] for a in anns)
        w0, h0 = info["width"], info["height"]
        gt = None
        poly_anns = [a for a in anns if isinstance(a.get("segmentation"), list) and a["segmentation"]]
        if any(isinstance(a.get("segmentation"), dict) for a in anns):
            warnings.warn(f"RLE segmentation in {info['file_name']} not supported; ignored")
        if poly_anns:
            masks = np.zeros((len(class_names), h0, w0), dtype=np.uint8)
            for a in poly_anns:
                canvas = Image.new("L", (w0, h0), 0)
                draw = ImageDraw.Draw(canvas)
                for poly in a["segmentation"]:
                    draw.polygon([tuple(poly[i : i + 2]) for i in range(0, len(poly), 2)], fill=1)
                masks[cat_to_idx[a["category_id"]]] |= np.asarray(canvas)
            gt_np = masks.astype(np.float32)
            if image_size is not None:
                resized = np.zeros((len(class_names), image_size, image_size), dtype=np.float32)
                for c in range(len(class_names)):
                    m = Image.fromarray((gt_np[c] * 255).astype(np.uint8))
                    resized[c] = np.asarray(m.resize((image_size, image_size), Image.NEAREST)) / 255.0
                gt_np = resized
            gt = torch.from_numpy(gt_np)
        pil = Image.open(img_path).convert("RGB")
        if image_size is not None:
            pil = pil.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float32) / 255.0
        items.append(
            LabeledImage(torch.from_numpy(arr.transpose(2, 0, 1)), labels, gt, name=Path(info["file_name"]).stem)
        )
    if not items:
        raise ValueError(f"no usable items in {json_path}")
    return MultiLabelDataset(items, class_names)


def load_multilabel_dataset(
    path: str | Path, format: str = "simple-folder", image_size: int | None = None
) -> MultiLabelDataset:
    """Load a dataset in one of the supported formats.

    format: "simple-folder" (images/ + labels.json), "voc-xml" (VOC layout
    root), or "coco-json" (path to the instances JSON).
    """
    path = Path(path)
    if format == "simple-folder":
        return _load_simple_folder(path)
    if format == "voc-xml":
        return _load_voc(path, image_size)
    if format == "coco-json":
        return _load_coco(path, image_size)
    raise ValueError(f"unknown dataset format {format!r}")


def preprocess(
    image,
    size: int,
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0),
    std: tuple[float, float, float] = (1.0, 1.0, 1.0),
    on_non_rgb: str = "convert",
) -> Tensor:
    """Resize to `size`, scale to [0, 1], normalize channels.

    Accepts a PIL image or a [3, H, W] tensor/array already in [0, 1].
    Non-RGB PIL inputs are converted by default or rejected when
    on_non_rgb="reject".
    """
    if isinstance(image, Image.Image):
        if image.mode != "RGB":
            if on_non_rgb == "reject":
                raise ValueError(f"expected RGB image, got mode {image.mode!r}")
            image = image.convert("RGB")
        if image.size != (size, size):
            image = image.resize((size, size), Image.BILINEAR)
        x = torch.from_numpy(np.asarray(image, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    else:
        x = torch.as_tensor(image, dtype=torch.float32)
        if x.dim() != 3 or x.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] input, got {tuple(x.shape)}")
        if x.shape[-2:] != (size, size):
            x = torch.nn.functional.interpolate(
                x.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
            )[0]
    m = x.new_tensor(mean).view(3, 1, 1)
    s = x.new_tensor(std).view(3, 1, 1)
    return (x - m) / s
