"""The classifier under explanation: fine-tune it, freeze it, query it.

Two concrete backbones hide behind one wrapper: a small from-scratch CNN
for desk-scale runs, and torchvision backbones (vgg16, resnet50) for
externally supplied pretrained weights. The wrapper owns input
normalization, so every entry point takes raw images in [0, 1], and the
masked forward paths keep gradients flowing to the masks even when the
parameters are frozen.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from torch import Tensor


@dataclass(frozen=True)
class InputSpec:
    """Expected spatial size and channel normalization of classifier inputs."""

    size: int
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)


IMAGENET_SPEC = InputSpec(size=224, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


class SmallConvNet(nn.Module):
    """Four conv blocks with global average pooling and a linear head."""

    def __init__(self, class_count: int, widths=(16, 32, 64, 64)):
        super().__init__()
        blocks = []
        c_in = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, w, 3, padding=1),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                )
            )
            c_in = w
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_in, class_count)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.pool(self.features(x)).flatten(1))


# Last convolutional feature map per architecture, for gradient-weighted
# activation maps. The small CNN points at the ReLU before its final pool.
_GRADCAM_LAYERS = {"small_cnn": "features.3.2", "vgg16": "features.29", "resnet50": "layer4"}


class Explanandum:
    """A multi-label classifier with a frozen/unfrozen lifecycle.

    Wraps a torch module mapping normalized [B, 3, H, W] images to logits
    [B, C]. Once frozen, parameters never change and forward passes run in
    evaluation mode, but inputs remain differentiable.
    """

    def __init__(
        self,
        net: nn.Module,
        class_count: int,
        input_spec: InputSpec,
        class_names: list[str] | None = None,
        arch: str = "custom",
        gradcam_layer: str | None = None,
    ):
        if class_names is not None and len(class_names) != class_count:
            raise ValueError("class_names length must equal class_count")
        self.net = net
        self.class_count = class_count
        self.input_spec = input_spec
        self.class_names = class_names or [f"class{i}" for i in range(class_count)]
        self.arch = arch
        self.gradcam_layer = gradcam_layer
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Explanandum":
        """Disable parameter gradients and latch evaluation mode. Idempotent."""
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        self._frozen = True
        return self

    def normalize(self, images: Tensor) -> Tensor:
        mean = images.new_tensor(self.input_spec.mean).view(1, 3, 1, 1)
        std = images.new_tensor(self.input_spec.std).view(1, 3, 1, 1)
        return (images - mean) / std

    def _check_batch(self, images: Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        if images.shape[-2] != self.input_spec.size or images.shape[-1] != self.input_spec.size:
            raise ValueError(
                f"expected spatial size {self.input_spec.size}, got {tuple(images.shape[-2:])}"
            )

    def logits(self, images: Tensor) -> Tensor:
        """Logits for a batch of raw [0, 1] images."""
        self._check_batch(images)
        return self.net(self.normalize(images))

    def masked_logits(self, images: Tensor, masks: Tensor, mask_space: str = "raw") -> Tensor:
        """Logits for masked images; masks are [B, H, W].

        mask_space "raw" multiplies before normalization (masked pixels
        become black); "normalized" multiplies after (masked pixels become
        the dataset mean).
        """
        self._check_batch(images)
        m = masks.unsqueeze(1)
        if mask_space == "raw":
            return self.net(self.normalize(images * m))
        if mask_space == "normalized":
            return self.net(self.normalize(images) * m)
        raise ValueError(f"unknown mask_space {mask_space!r}")

    def masked_probs(self, images: Tensor, masks: Tensor, mask_space: str = "raw") -> Tensor:
        return torch.sigmoid(self.masked_logits(images, masks, mask_space))

    def predict_probs(self, images: Tensor) -> Tensor:
        """Per-class sigmoid probabilities, [N, C] in [0, 1]."""
        return torch.sigmoid(self.logits(images))

    def predict_softmax(self, images: Tensor) -> Tensor:
        """Softmax distribution over classes; each row sums to 1."""
        return torch.softmax(self.logits(images), dim=-1)

    def gradcam_module(self) -> nn.Module:
        if self.gradcam_layer is None:
            raise ValueError("classifier declares no convolutional feature map for grad-cam")
        modules = dict(self.net.named_modules())
        if self.gradcam_layer not in modules:
            raise ValueError(f"gradcam layer {self.gradcam_layer!r} not found in network")
        return modules[self.gradcam_layer]

    def parameter_checksum(self) -> str:
        """SHA-256 over all state tensors in sorted key order."""
        digest = hashlib.sha256()
        state = self.net.state_dict()
        for key in sorted(state):
            digest.update(key.encode())
            digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def save(self, path: str | Path) -> None:
        """Write weights plus a manifest JSON describing the input contract."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), path)
        manifest = {
            "arch": self.arch,
            "class_count": self.class_count,
            "class_names": self.class_names,
            "input_size": self.input_spec.size,
            "normalization_mean": list(self.input_spec.mean),
            "normalization_std": list(self.input_spec.std),
            "gradcam_layer": self.gradcam_layer,
        }
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2))


def build_small_classifier(
    class_count: int,
    input_size: int = 64,
    class_names: list[str] | None = None,
    seed: int | None = None,
) -> Explanandum:
    """Fresh desk-scale CNN with identity normalization."""
    if seed is not None:
        torch.manual_seed(seed)
    net = SmallConvNet(class_count)
    spec = InputSpec(size=input_size)
    return Explanandum(
        net, class_count, spec, class_names, arch="small_cnn", gradcam_layer=_GRADCAM_LAYERS["small_cnn"]
    )


def build_torchvision_classifier(
    arch: str,
    class_count: int,
    class_names: list[str] | None = None,
    weights_path: str | Path | None = None,
) -> Explanandum:
    """Adapter for vgg16/resnet50 backbones with a multi-label head.

    No weights are downloaded; `weights_path` may point to a state dict
    saved from a previously fine-tuned model.
    """
    import torchvision.models as tvm

    if arch == "vgg16":
        net = tvm.vgg16(weights=None)
        net.classifier[6] = nn.Linear(net.classifier[6].in_features, class_count)
    elif arch == "resnet50":
        net = tvm.resnet50(weights=None)
        net.fc = nn.Linear(net.fc.in_features, class_count)
    else:
        raise ValueError(f"unsupported torchvision arch {arch!r}")
    if weights_path is not None:
        net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
    return Explanandum(
        net, class_count, IMAGENET_SPEC, class_names, arch=arch, gradcam_layer=_GRADCAM_LAYERS[arch]
    )


def load_classifier(path: str | Path) -> Explanandum:
    """Rebuild a classifier from a checkpoint and its manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    manifest = json.loads(path.with_suffix(".manifest.json").read_text())
    arch = manifest["arch"]
    if arch == "small_cnn":
        net = SmallConvNet(manifest["class_count"])
    elif arch in ("vgg16", "resnet50"):
        return build_torchvision_classifier(
            arch, manifest["class_count"], manifest["class_names"], weights_path=path
        )
    else:
        raise ValueError(f"unknown arch {arch!r} in manifest")
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    spec = InputSpec(
        size=manifest["input_size"],
        mean=tuple(manifest["normalization_mean"]),
        std=tuple(manifest["normalization_std"]),
    )
    return Explanandum(
        net,
        manifest["class_count"],
        spec,
        manifest["class_names"],
        arch=arch,
        gradcam_layer=manifest.get("gradcam_layer"),
    )


def multilabel_counts(pred: Tensor, target: Tensor) -> tuple[int, int, int]:
    """(true positives, false positives, false negatives) over all cells."""
    pred = pred.bool()
    target = target.bool()
    tp = int((pred & target).sum())
    fp = int((pred & ~target).sum())
    fn = int((~pred & target).sum())
    return tp, fp, fn


def micro_f1(pred: Tensor, target: Tensor) -> tuple[float, float, float]:
    """Micro-averaged (precision, recall, f1) for multi-hot predictions."""
    tp, fp, fn = multilabel_counts(pred, target)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def per_class_f1(pred: Tensor, target: Tensor) -> list[float]:
    scores = []
    for c in range(pred.shape[1]):
        _, _, f1 = micro_f1(pred[:, c : c + 1], target[:, c : c + 1])
        scores.append(f1)
    return scores


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 3
    min_delta: float = 1e-3
    decision_threshold: float = 0.5


def finetune_classifier(
    model: Explanandum,
    train_images: Tensor,
    train_labels: Tensor,
    cfg: FinetuneConfig,
    val_images: Tensor | None = None,
    val_labels: Tensor | None = None,
    verbose: bool = False,
) -> Explanandum:
    """Multi-label BCE fine-tuning; stops early once validation micro-F1
    plateaus for `patience` epochs.

    `train_labels` is a multi-hot [N, C] tensor. Classes with zero positive
    examples are kept but flagged with a warning.
    """
    if model.frozen:
        raise ValueError("cannot fine-tune a frozen classifier")
    if cfg.epochs == 0:
        return model
    empty = (train_labels.sum(dim=0) == 0).nonzero().flatten().tolist()
    if empty:
        warnings.warn(f"classes {empty} have zero positive training labels; kept anyway")

    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    criterion = nn.BCEWithLogitsLoss()
    n = train_images.shape[0]
    best_f1, stale = -1.0, 0

    for epoch in range(cfg.epochs):
        model.net.train()
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            optimizer.zero_grad()
            logits = model.logits(train_images[idx])
            loss = criterion(logits, train_labels[idx].to(logits.dtype))
            loss.backward()
            optimizer.step()
        if val_images is None:
            continue
        model.net.eval()
        with torch.no_grad():
            probs = model.predict_probs(val_images)
        _, _, f1 = micro_f1(probs >= cfg.decision_threshold, val_labels)
        if verbose:
            print(f"epoch {epoch}: val micro-F1 {f1:.4f}", flush=True)
        if f1 > best_f1 + cfg.min_delta:
            best_f1, stale = f1, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.net.eval()
    return model
