"""Mask-network optimization against a frozen classifier.

One Adam step per batch over the full composite loss, with both masked
classifier forwards inside the same graph. Runs are reproducible given a
seed; checkpoints capture enough state (parameters, optimizer, RNG) that
resuming at an epoch boundary replays the exact uninterrupted trajectory.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .classifier import Explanandum
from .data import MultiLabelDataset
from .explainer import MaskExplainer
from .losses import LossConfig, LossNanError, explainer_loss_batch


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = none
    mask_space: str = "raw"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        return TrainConfig(**d)


@dataclass
class TrainResult:
    explainer: MaskExplainer
    log: list[dict]
    steps: int
    epochs_run: int


def save_checkpoint(
    path: str | Path,
    explainer: MaskExplainer,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    epoch: int = 0,
    data_rng_state: torch.Tensor | None = None,
) -> None:
    """Persist model, optimizer and counters so a run can resume bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": explainer.state_dict(),
        "config": asdict(explainer.cfg),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "epoch": epoch,
        "data_rng_state": data_rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint dict; fails cleanly on missing or corrupt files."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises various unpickling errors
        raise RuntimeError(f"checkpoint at {path} is corrupt: {exc}") from exc


def explainer_from_checkpoint(path: str | Path) -> MaskExplainer:
    from .explainer import ExplainerConfig

    payload = load_checkpoint(path)
    cfg_dict = dict(payload["config"])
    for key in ("mean", "std"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = MaskExplainer(ExplainerConfig(**cfg_dict))
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def train_explainer(
    classifier: Explanandum,
    explainer: MaskExplainer,
    dataset: MultiLabelDataset,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Minimize the composite loss by Adam, one step per batch.

    Emits one JSON log record per step with keys {step, total, cls, ent,
    area, tv}. The classifier must already be frozen; a NaN in any loss
    component restores the last good parameters and raises LossNanError.
    """
    if not classifier.frozen:
        raise ValueError("classifier must be frozen before explainer training")
    if any(not item.labels for item in dataset):
        raise ValueError("every training image needs a nonempty label set")

    device = next(explainer.parameters()).device
    images = dataset.image_stack()
    label_matrix = dataset.label_matrix()
    n = len(dataset)

    optimizer = torch.optim.Adam(explainer.parameters(), lr=cfg.learning_rate)
    data_rng = torch.Generator().manual_seed(cfg.seed)
    step = 0
    start_epoch = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        explainer.load_state_dict(payload["model"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        step = payload["step"]
        start_epoch = payload["epoch"]
        if payload["data_rng_state"] is not None:
            data_rng.set_state(payload["data_rng_state"])

    log: list[dict] = []
    log_file = open(log_path, "a") if log_path is not None else None
    last_good = copy.deepcopy(explainer.state_dict())
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    try:
        for epoch in range(start_epoch, cfg.epochs):
            explainer.train()
            perm = torch.randperm(n, generator=data_rng)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                batch = images[idx].to(device)
                optimizer.zero_grad()
                class_masks = explainer(batch)
                try:
                    breakdown = explainer_loss_batch(
                        batch, label_matrix[idx].to(device), class_masks, classifier, cfg.loss, cfg.mask_space
                    )
                except LossNanError:
                    explainer.load_state_dict(last_good)
                    raise
                breakdown.total.backward()
                optimizer.step()
                step += 1
                record = {"step": step, **breakdown.scalars()}
                log.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
            last_good = copy.deepcopy(explainer.state_dict())
            if verbose:
                print(f"epoch {epoch}: loss {log[-1]['total']:.4f}", flush=True)
            if ckpt_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    ckpt_dir / f"explainer_epoch{epoch + 1:04d}.pt",
                    explainer,
                    optimizer,
                    step,
                    epoch + 1,
                    data_rng.get_state(),
                )
    finally:
        if log_file is not None:
            log_file.close()

    explainer.eval()
    if ckpt_dir is not None:
        save_checkpoint(
            ckpt_dir / "explainer_final.pt", explainer, optimizer, step, cfg.epochs, data_rng.get_state()
        )
    return TrainResult(explainer=explainer, log=log, steps=step, epochs_run=cfg.epochs - start_epoch)
