"""Texture-patch dataset construction and a small patch classifier.

Patches are 32x32 crops whose mask footprint is a single aquatic class,
taken on a stride-32 grid from (0,0) so no two patches of one image share
a pixel. The label map turns source waterbody classes into texture labels:
canal, ditch, reservoir and fjord are dropped, and images containing
mangrove (or cypress tree) pixels have their water patches relabeled
estuary (or swamp), mangrove taking precedence when both occur.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import metrics as M
from .data import load_image, save_image
from .errors import ConfigInvalid, IoFailure, SingleClassDataset
from .network import _conv_gn_relu
from .taxonomy import ClassTaxonomy

PATCH = 32

DEFAULT_OMIT = ("canal", "ditch", "reservoir", "fjord")
# (trigger class, emitted label); listed in precedence order
DEFAULT_REMAPS = (("mangrove", "estuary"), ("cypress tree", "swamp"))


@dataclass(frozen=True)
class AtexLabelMap:
    """Maps source waterbody classes to texture labels.

    ``labels[i]`` is the name of texture label i. ``omitted`` classes produce
    no patches. Each ``(trigger, new_label)`` remap fires when the trigger
    class appears anywhere in the source image; the first firing remap wins.
    """

    labels: tuple
    omitted: frozenset
    remaps: tuple

    @classmethod
    def from_taxonomy(cls, taxonomy: ClassTaxonomy,
                      omit: Sequence[str] = DEFAULT_OMIT,
                      remaps: Sequence[tuple] = DEFAULT_REMAPS) -> "AtexLabelMap":
        """Label set = aquatic classes minus omitted, plus one label per
        remap whose trigger class exists in the taxonomy. Base labels keep
        taxonomy id order; remap labels append after."""
        names = set(taxonomy.names)
        omitted = frozenset(o for o in omit if o in names)
        active = tuple((t, new) for t, new in remaps if t in names)
        base = [c.name for c in taxonomy.classes
                if c.aquatic and c.name not in omitted]
        labels = tuple(base) + tuple(new for _, new in active)
        if len(set(labels)) != len(labels):
            raise ConfigInvalid(f"duplicate texture labels in {labels}")
        return cls(labels=labels, omitted=omitted, remaps=active)

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def label_id(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise KeyError(f"unknown texture label {name!r}") from None

    def resolve(self, source_class: str, present_classes: set) -> Optional[int]:
        """Texture label id for a uniform patch of ``source_class`` inside an
        image containing ``present_classes``; None if the patch is dropped."""
        if source_class in self.omitted:
            return None
        for trigger, new_label in self.remaps:
            if trigger in present_classes:
                return self.label_id(new_label)
        return self.label_id(source_class)


@dataclass(frozen=True)
class TexturePatch:
    pixels: torch.Tensor  # float32 (3, 32, 32)
    label: int
    source: tuple  # (image id, top row, left col)


def extract_patches(image: torch.Tensor, mask, taxonomy: ClassTaxonomy,
                    label_map: AtexLabelMap, image_id: str = "") -> list[TexturePatch]:
    """Scan stride-32 grid tiles row-major from (0,0); keep tiles whose mask
    footprint is one aquatic class the label map includes."""
    mask = np.asarray(mask.numpy() if isinstance(mask, torch.Tensor) else mask)
    if image.shape[-2:] != mask.shape:
        raise ConfigInvalid(
            f"image {tuple(image.shape)} and mask {mask.shape} misaligned")
    by_id = {c.id: c for c in taxonomy.classes}
    present = {by_id[i].name for i in np.unique(mask) if i in by_id}
    patches = []
    h, w = mask.shape
    for top in range(0, h - PATCH + 1, PATCH):
        for left in range(0, w - PATCH + 1, PATCH):
            tile = mask[top:top + PATCH, left:left + PATCH]
            first = int(tile[0, 0])
            if first not in by_id or not by_id[first].aquatic:
                continue
            if not (tile == first).all():
                continue
            label = label_map.resolve(by_id[first].name, present)
            if label is None:
                continue
            patches.append(TexturePatch(
                pixels=image[:, top:top + PATCH, left:left + PATCH].clone(),
                label=label,
                source=(image_id, top, left),
            ))
    return patches


def split_patches(patches: Sequence[TexturePatch], ratios: tuple = (0.7, 0.1, 0.2),
                  seed: int = 0) -> dict:
    """Stratified partition into train/val/test: within each label, a seeded
    shuffle then a largest-remainder quota so every patch lands in exactly
    one split and split sizes match the ratios as closely as possible."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigInvalid(f"ratios must be three non-negatives summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, p in enumerate(patches):
        by_label.setdefault(p.label, []).append(i)
    out = {"train": [], "val": [], "test": []}
    names = ("train", "val", "test")
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        n = len(idx)
        quota = [math.floor(n * r) for r in ratios]
        remainder = [(n * r) - math.floor(n * r) for r in ratios]
        short = n - sum(quota)
        for j in sorted(range(3), key=lambda j: (-remainder[j], j))[:short]:
            quota[j] += 1
        start = 0
        for name, q in zip(names, quota):
            out[name].extend(patches[i] for i in idx[start:start + q])
            start += q
    return out


def save_patches(root, splits: dict) -> Path:
    """Write a patch store: patches/<split>/<label>/ images plus a manifest
    recording source coordinates."""
    root = Path(root)
    rows = []
    for split, patches in splits.items():
        for p in patches:
            image_id, top, left = p.source
            name = f"{image_id}_{top}_{left}.png"
            rel = Path("patches") / split / str(p.label) / name
            save_image(root / rel, p.pixels)
            rows.append({"path": str(rel), "split": split, "label": p.label,
                         "source_image": image_id, "top": top, "left": left})
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "patches.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["path", "split", "label",
                                                "source_image", "top", "left"])
        writer.writeheader()
        writer.writerows(rows)
    return root / "patches.csv"


def load_patches(root) -> dict:
    """Read a patch store back into {split: [TexturePatch, ...]}."""
    root = Path(root)
    manifest = root / "patches.csv"
    if not manifest.exists():
        raise IoFailure(f"patch manifest not found: {manifest}")
    splits: dict = {"train": [], "val": [], "test": []}
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            patch = TexturePatch(
                pixels=load_image(root / row["path"]),
                label=int(row["label"]),
                source=(row["source_image"], int(row["top"]), int(row["left"])),
            )
            splits[row["split"]].append(patch)
    return splits


class TextureClassifier(nn.Module):
    """Three stride-2 conv stages, global average pool, linear head."""

    def __init__(self, num_labels: int, width: int = 24):
        super().__init__()
        if num_labels < 2:
            raise ConfigInvalid("classifier needs at least 2 labels")
        self.num_labels = num_labels
        self.width = width
        self.features = nn.Sequential(
            _conv_gn_relu(3, width, stride=2),
            _conv_gn_relu(width, 2 * width, stride=2),
            _conv_gn_relu(2 * width, 2 * width, stride=2),
        )
        self.head = nn.Linear(2 * width, num_labels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        return self.head(f.mean(dim=(-2, -1)))


@dataclass
class AtexTrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iters: int = 300
    batch_size: int = 32
    width: int = 24
    seed: int = 0


def _stack(patches: Sequence[TexturePatch]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([p.pixels for p in patches])
    labels = torch.tensor([p.label for p in patches], dtype=torch.int64)
    return images, labels


def atex_train(patches: Sequence[TexturePatch], num_labels: int,
               config: AtexTrainConfig = None) -> tuple[TextureClassifier, list]:
    """Cross-entropy training of the texture classifier with SGD momentum
    under the poly schedule. Returns (model, loss log rows)."""
    from .training import poly_lr

    config = config or AtexTrainConfig()
    if not patches:
        raise SingleClassDataset("no patches to train on")
    seen = {p.label for p in patches}
    if len(seen) < 2:
        raise SingleClassDataset(f"need >= 2 labels, found {sorted(seen)}")
    images, labels = _stack(patches)
    torch.manual_seed(config.seed)
    model = TextureClassifier(num_labels, width=config.width)
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=config.base_lr,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    rows = []
    for it in range(config.max_iters):
        lr = poly_lr(config.base_lr, it, config.max_iters, config.power)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFF, it]))
        picks = torch.from_numpy(rng.integers(0, len(patches), size=config.batch_size))
        loss = F.cross_entropy(model(images[picks]), labels[picks])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        rows.append({"iter": it, "lr": lr, "loss": loss.item()})
    return model, rows


def atex_predict(model: TextureClassifier, patches: Sequence[TexturePatch],
                 batch_size: int = 256) -> torch.Tensor:
    model.eval()
    images, _ = _stack(patches)
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            preds.append(model(images[start:start + batch_size]).argmax(dim=1))
    return torch.cat(preds)


def atex_eval(model: TextureClassifier, patches: Sequence[TexturePatch],
              label_names: Optional[Sequence[str]] = None) -> dict:
    """Weighted precision/recall/F1 plus per-label rows."""
    if not patches:
        raise SingleClassDataset("no patches to evaluate")
    preds = atex_predict(model, patches)
    true = [p.label for p in patches]
    k = model.num_labels
    precision, recall, f1 = M.weighted_prf(true, preds.tolist(), k)
    per_class = M.per_class_prf(true, preds.tolist(), k)
    if label_names is not None:
        for row in per_class:
            row["label"] = label_names[row["class_id"]]
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "n_patches": len(patches),
        "per_class": per_class,
    }


def render_atex_report(report: dict) -> str:
    """Aligned text block: weighted Prec. / Recall / F1 header line plus one
    row per label."""
    lines = [f"weighted  Prec. {100 * report['precision']:.2f}  "
             f"Recall {100 * report['recall']:.2f}  F1 {100 * report['f1']:.2f}  "
             f"(n={report['n_patches']})"]
    for row in report["per_class"]:
        name = row.get("label", str(row["class_id"]))
        lines.append(f"  {name:<16} Prec. {100 * row['precision']:6.2f}  "
                     f"Recall {100 * row['recall']:6.2f}  F1 {100 * row['f1']:6.2f}  "
                     f"support {row['support']}")
    return "\n".join(lines)
