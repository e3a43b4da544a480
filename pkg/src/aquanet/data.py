"""On-disk dataset layout and sample IO.

Layout:
  root/
    taxonomy.yaml            (optional; datasets may also rely on the shipped one)
    manifest.csv             name,split,annotator,primary_label per image
    images/{train,val,test}/<name>.png   RGB
    masks/{train,val,test}/<name>.png    single-channel 8-bit class indices

Masks store class ids directly; 255 is the conventional ignore sentinel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image

from .errors import EmptyDataset, IoFailure

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SegSample:
    name: str
    image_path: Path
    mask_path: Path
    split: str
    annotator_id: Optional[str] = None
    primary_label: Optional[int] = None


class SegDataset:
    """Manifest-backed list of samples under one dataset root."""

    def __init__(self, root, samples: list[SegSample]):
        self.root = Path(root)
        self.samples = samples

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SegSample]:
        return iter(self.samples)

    def subset(self, split: str) -> "SegDataset":
        return SegDataset(self.root, [s for s in self.samples if s.split == split])

    @property
    def taxonomy_path(self) -> Optional[Path]:
        p = self.root / "taxonomy.yaml"
        return p if p.exists() else None


def load_dataset(root) -> SegDataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise IoFailure(f"dataset manifest not found: {manifest}")
    samples = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            name, split = row["name"], row["split"]
            if split not in SPLITS:
                raise IoFailure(f"sample {name!r} has unknown split {split!r}")
            primary = row.get("primary_label") or None
            samples.append(
                SegSample(
                    name=name,
                    image_path=root / "images" / split / f"{name}.png",
                    mask_path=root / "masks" / split / f"{name}.png",
                    split=split,
                    annotator_id=row.get("annotator") or None,
                    primary_label=int(primary) if primary is not None else None,
                )
            )
    if not samples:
        raise EmptyDataset(f"manifest {manifest} lists no samples")
    return SegDataset(root, samples)


def write_manifest(root, rows: list[dict]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "split", "annotator", "primary_label"])
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "name": row["name"],
                    "split": row["split"],
                    "annotator": row.get("annotator") or "",
                    "primary_label": "" if row.get("primary_label") is None else row["primary_label"],
                }
            )
    return path


def load_image(path) -> torch.Tensor:
    """RGB PNG -> float32 (3,H,W) in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path) -> torch.Tensor:
    """Index PNG -> int64 (H,W)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.int64)
    return torch.from_numpy(arr)


def save_image(path, image) -> None:
    """float (3,H,W) in [0,1] (tensor or array) -> RGB PNG."""
    arr = image.numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.clip(arr, 0.0, 1.0)
    arr = (arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(path, mask) -> None:
    """(H,W) integer ids -> single-channel 8-bit PNG."""
    arr = mask.numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise IoFailure("mask ids must fit in 8 bits")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def save_indexed(path, grid, palette: dict[int, tuple[int, int, int]] | None = None) -> None:
    """(H,W) ids -> palettized PNG (ids preserved as pixel values)."""
    arr = np.asarray(grid, dtype=np.uint8)
    im = Image.fromarray(arr, mode="P")
    table = [0] * 768
    rng = np.random.default_rng(7)
    colors = {i: tuple(int(v) for v in rng.integers(40, 256, 3)) for i in range(256)}
    colors[255] = (0, 0, 0)
    if palette:
        colors.update(palette)
    for idx, (r, g, b) in colors.items():
        table[3 * idx: 3 * idx + 3] = [r, g, b]
    im.putpalette(table)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)
