"""Loss, poly learning-rate schedule, augmentation and the train/eval loops.

Training is SGD with momentum and weight decay, the learning rate following
base * (1 - iter/max_iter)^power. The loss is mean cross-entropy over
non-ignored pixels on the final logits plus 0.4x the same on the auxiliary
logits (bilinearly upsampled to full resolution, so the mask is never
downsampled). All randomness derives from one root seed, split per
iteration, so reruns are bit-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as M
from .checkpoint import save_checkpoint
from .data import SegDataset, load_image, load_mask
from .errors import (AllPixelsIgnored, ConfigInvalid, DivergedLoss,
                     EmptyDataset)
from .network import AquaNetConfig, build_model, valid_eval_size
from .taxonomy import ClassTaxonomy


@dataclass
class TrainConfig:
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iters: int = 500
    batch_size: int = 2
    crop: int = 640
    scale_range: tuple = (0.5, 2.0)
    hflip_prob: float = 0.5
    aux_weight: float = 0.4
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.base_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigInvalid("rates must be positive (lr) / non-negative")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigInvalid(f"bad scale_range {self.scale_range}")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigInvalid(f"bad hflip_prob {self.hflip_prob}")
        if self.max_iters < 0 or self.batch_size < 1 or self.crop < 1:
            raise ConfigInvalid("max_iters >= 0, batch_size >= 1, crop >= 1 required")
        if self.aux_weight < 0:
            raise ConfigInvalid(f"aux_weight must be >= 0, got {self.aux_weight}")
        return self

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {k: d[k] for k in cls().__dict__ if k in d}
        if "scale_range" in kwargs:
            kwargs["scale_range"] = tuple(kwargs["scale_range"])
        return cls(**kwargs).validate()


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iter/max_iter)^power."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside 0..{max_iter}")
    return base * (1.0 - iteration / max_iter) ** power


def loss_terms(p_final: torch.Tensor, p_aux: torch.Tensor, target: torch.Tensor,
               ignore_id: int, aux_weight: float = 0.4) -> tuple[torch.Tensor, torch.Tensor]:
    """(main, aux) cross-entropy terms; aux is zero when aux_weight is 0."""
    if p_final.dim() == 3:
        p_final = p_final.unsqueeze(0)
        p_aux = p_aux.unsqueeze(0)
        target = target.unsqueeze(0)
    if (target != ignore_id).sum() == 0:
        raise AllPixelsIgnored("every target pixel carries the ignore id")
    main = F.cross_entropy(p_final, target, ignore_index=ignore_id)
    if aux_weight == 0:
        return main, torch.zeros((), dtype=p_final.dtype)
    aux_up = F.interpolate(p_aux, size=target.shape[-2:], mode="bilinear",
                           align_corners=False)
    aux = F.cross_entropy(aux_up, target, ignore_index=ignore_id)
    return main, aux


def total_loss(p_final: torch.Tensor, p_aux: torch.Tensor, target: torch.Tensor,
               ignore_id: int, aux_weight: float = 0.4) -> torch.Tensor:
    """Mean CE over non-ignored pixels plus aux_weight x auxiliary CE."""
    main, aux = loss_terms(p_final, p_aux, target, ignore_id, aux_weight)
    if aux_weight == 0:
        return main
    return main + aux_weight * aux


def _resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(image.unsqueeze(0), size=size, mode="bilinear",
                         align_corners=False).squeeze(0)


def _resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    out = F.interpolate(mask.unsqueeze(0).unsqueeze(0).float(), size=size,
                        mode="nearest").squeeze(0).squeeze(0)
    return out.long()


def augment(image: torch.Tensor, mask: torch.Tensor, rng: np.random.Generator,
            config: TrainConfig, ignore_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Random hflip, random scale, random crop. One geometric transform for
    both tensors; masks resampled nearest; out-of-bounds crop area padded
    with the per-channel image mean / the ignore id."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} misaligned")
    if rng.random() < config.hflip_prob:
        image = torch.flip(image, dims=(-1,))
        mask = torch.flip(mask, dims=(-1,))
    lo, hi = config.scale_range
    scale = rng.uniform(lo, hi)
    h, w = mask.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        image = _resize_image(image, (nh, nw))
        mask = _resize_mask(mask, (nh, nw))
    crop = config.crop
    ph, pw = max(nh, crop), max(nw, crop)
    if (ph, pw) != (nh, nw):
        mean = image.mean(dim=(-2, -1))
        canvas = mean.view(-1, 1, 1).expand(-1, ph, pw).clone()
        canvas[:, :nh, :nw] = image
        image = canvas
        mcanvas = torch.full((ph, pw), ignore_id, dtype=mask.dtype)
        mcanvas[:nh, :nw] = mask
        mask = mcanvas
    top = int(rng.integers(0, ph - crop + 1))
    left = int(rng.integers(0, pw - crop + 1))
    return (image[:, top:top + crop, left:left + crop].contiguous(),
            mask[top:top + crop, left:left + crop].contiguous())


@dataclass
class TrainResult:
    model: torch.nn.Module
    log_rows: list = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, iteration]))


def train(model_config: AquaNetConfig, train_config: TrainConfig,
          dataset: SegDataset, taxonomy: ClassTaxonomy,
          out_dir=None, log_fn=None) -> TrainResult:
    """Run the training loop on the dataset's train split and return the
    trained model plus the per-iteration (iter, lr, main, aux, total) log.
    Writes checkpoint.pt and train_log.csv under out_dir when given."""
    train_config.validate()
    samples = dataset.subset("train").samples or dataset.samples
    if not samples:
        raise EmptyDataset("no training samples")
    cache = [(load_image(s.image_path), load_mask(s.mask_path)) for s in samples]

    torch.manual_seed(train_config.seed)
    model = build_model(model_config, taxonomy, seed=train_config.seed)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=train_config.base_lr,
                                momentum=train_config.momentum,
                                weight_decay=train_config.weight_decay)
    rows = []
    for it in range(train_config.max_iters):
        lr = poly_lr(train_config.base_lr, it, train_config.max_iters, train_config.power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = _iteration_rng(train_config.seed, it)
        picks = rng.integers(0, len(cache), size=train_config.batch_size)
        images, masks = [], []
        for j in picks:
            img, msk = augment(cache[j][0], cache[j][1], rng, train_config,
                               taxonomy.ignore_id)
            images.append(img)
            masks.append(msk)
        batch = torch.stack(images)
        target = torch.stack(masks)

        p_final, p_aux = model(batch)
        main, aux = loss_terms(p_final, p_aux, target, taxonomy.ignore_id,
                               train_config.aux_weight)
        total = main + train_config.aux_weight * aux
        if not math.isfinite(total.item()):
            raise DivergedLoss(
                f"non-finite loss at iteration {it}: main={main.item()} aux={aux.item()}"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        row = {"iter": it, "lr": lr, "loss_main": main.item(),
               "loss_aux": aux.item(), "loss_total": total.item()}
        rows.append(row)
        if log_fn is not None:
            log_fn(row)

    result = TrainResult(model=model, log_rows=rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.log_path = write_loss_log(out_dir / "train_log.csv", rows)
        result.checkpoint_path = save_checkpoint(
            out_dir / "checkpoint.pt", model, model_config.to_dict(), taxonomy,
            kind="aquanet",
            extra={"iterations": train_config.max_iters, "seed": train_config.seed},
        )
    return result


def write_loss_log(path, rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iter", "lr", "loss_main",
                                                "loss_aux", "loss_total"])
        writer.writeheader()
        for row in rows:
            writer.writerow({"iter": row["iter"], "lr": repr(row["lr"]),
                             "loss_main": repr(row["loss_main"]),
                             "loss_aux": repr(row["loss_aux"]),
                             "loss_total": repr(row["loss_total"])})
    return path


def predict_mask(model: torch.nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Whole-image inference: resize to a stride-valid size, predict, argmax,
    resize the index mask back nearest."""
    h, w = image.shape[-2:]
    vh, vw = valid_eval_size(h, w)
    x = image if (vh, vw) == (h, w) else _resize_image(image, (vh, vw))
    with torch.no_grad():
        p_final, _ = model(x.unsqueeze(0))
    pred = p_final.argmax(dim=1).squeeze(0)
    if (vh, vw) != (h, w):
        pred = _resize_mask(pred, (h, w))
    return pred


def evaluate(model: torch.nn.Module, dataset: SegDataset,
             taxonomy: ClassTaxonomy, split: Optional[str] = None) -> M.MetricsReport:
    """Evaluate on a dataset (optionally one split) and report acc, mIoU,
    A-acc, A-mIoU and per-class IoU."""
    samples = dataset.subset(split).samples if split else dataset.samples
    if not samples:
        raise EmptyDataset(f"no samples to evaluate (split={split!r})")
    was_training = model.training
    model.eval()
    cm = M.ConfusionMatrix(taxonomy.num_classes)
    for s in samples:
        pred = predict_mask(model, load_image(s.image_path))
        M.accumulate(cm, pred.numpy(), load_mask(s.mask_path).numpy(), taxonomy.ignore_id)
    if was_training:
        model.train()
    return M.segmentation_report(cm, taxonomy)
